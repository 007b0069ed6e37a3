//! Control-zone membership, FIFO ordering, neighbour links and message routing.

use crate::error::{Error, Result};
use crate::model::{eval_b1, BoundVector, CavAgent, CavId, CavState, ConstraintParams, Geometry, Lane};

/// Vehicles currently inside the control zone, in FIFO order.
///
/// Position `p` in [`ConflictZone::agents`] is FIFO index `p + 1`; indices
/// shift down when the front vehicle leaves, ids never change.
#[derive(Debug, Clone)]
pub struct ConflictZone {
    pub geometry: Geometry,
    agents: Vec<CavAgent>,
    next_id: CavId,
    message_count: u64,
}

impl ConflictZone {
    pub fn new(geometry: Geometry) -> Self {
        Self {
            geometry,
            agents: Vec::new(),
            next_id: 1,
            message_count: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.agents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.agents.is_empty()
    }

    pub fn agents(&self) -> &[CavAgent] {
        &self.agents
    }

    pub fn agents_mut(&mut self) -> &mut [CavAgent] {
        &mut self.agents
    }

    pub fn fifo(&self) -> Vec<CavId> {
        self.agents.iter().map(|a| a.id).collect()
    }

    pub fn position(&self, id: CavId) -> Option<usize> {
        self.agents.iter().position(|a| a.id == id)
    }

    /// One-based FIFO index.
    pub fn index_of(&self, id: CavId) -> Option<usize> {
        self.position(id).map(|p| p + 1)
    }

    pub fn get(&self, id: CavId) -> Option<&CavAgent> {
        self.agents.iter().find(|a| a.id == id)
    }

    pub fn get_mut(&mut self, id: CavId) -> Option<&mut CavAgent> {
        self.agents.iter_mut().find(|a| a.id == id)
    }

    pub fn state_of(&self, id: CavId) -> Option<CavState> {
        self.get(id).map(|a| a.state)
    }

    pub fn message_count(&self) -> u64 {
        self.message_count
    }

    /// Most recent arrival on `lane` still inside the zone.
    pub fn last_on_lane(&self, lane: Lane) -> Option<&CavAgent> {
        self.agents.iter().rev().find(|a| a.lane == lane)
    }

    /// Rear-end margin a vehicle entering `lane` at speed `v0` would have.
    pub fn entry_margin(&self, lane: Lane, v0: f64, params: &ConstraintParams) -> Option<f64> {
        self.last_on_lane(lane)
            .map(|ip| eval_b1(CavState::new(0.0, v0), ip.state, params))
    }

    /// Appends a vehicle at `x = 0`. Fails if the entry would violate the
    /// rear-end constraint; the caller retries later.
    pub fn admit(
        &mut self,
        lane: Lane,
        t: f64,
        v0: f64,
        s: BoundVector,
        params: &ConstraintParams,
    ) -> Result<CavId> {
        if !(params.v_min..=params.v_max).contains(&v0) {
            return Err(Error::Domain {
                what: "entry speed",
                value: v0,
                lo: params.v_min,
                hi: params.v_max,
            });
        }
        if let Some(margin) = self.entry_margin(lane, v0, params) {
            if margin < 0.0 {
                return Err(Error::EntryBlocked {
                    lane: lane.as_str(),
                    margin,
                });
            }
        }
        let id = self.next_id;
        self.next_id += 1;
        self.agents.push(CavAgent::new(id, lane, t, v0, s));
        self.relink();
        Ok(id)
    }

    /// Removes vehicle `id`, recording its exit time.
    pub fn exit(&mut self, id: CavId, t: f64) -> Option<CavAgent> {
        let p = self.position(id)?;
        let mut agent = self.agents.remove(p);
        agent.tf = Some(t);
        self.relink();
        Some(agent)
    }

    /// Re-resolves every vehicle's `ip` (nearest earlier vehicle on the same
    /// lane) and `j` (the vehicle just ahead in FIFO order, if on the other
    /// lane).
    fn relink(&mut self) {
        for p in 0..self.agents.len() {
            let lane = self.agents[p].lane;
            let ip = self.agents[..p].iter().rev().find(|a| a.lane == lane).map(|a| a.id);
            let j = p
                .checked_sub(1)
                .map(|q| &self.agents[q])
                .filter(|a| a.lane != lane)
                .map(|a| a.id);
            let a = &mut self.agents[p];
            a.ip = ip;
            a.j = j;
        }
    }

    /// Vehicles whose constraints involve `source`. Counts one message to the
    /// coordinator plus one per forwarded copy.
    pub fn propagate_trigger(&mut self, source: CavId) -> Vec<CavId> {
        let out: Vec<CavId> = self
            .agents
            .iter()
            .filter(|a| a.ip == Some(source) || a.j == Some(source))
            .map(|a| a.id)
            .collect();
        self.message_count += 1 + out.len() as u64;
        out
    }
}
