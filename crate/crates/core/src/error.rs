use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("value {value} outside domain [{lo}, {hi}] for {what}")]
    Domain {
        what: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("invalid parameter: {0}")]
    InvalidParams(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("reference planner did not converge (v0={v0}, L={length}, beta={beta})")]
    PlannerDiverged { v0: f64, length: f64, beta: f64 },

    #[error("entry blocked on lane {lane}: rear-end margin {margin} < 0")]
    EntryBlocked { lane: &'static str, margin: f64 },

    #[error("no completed vehicles to aggregate")]
    EmptyMetrics,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    TomlDe(#[from] toml::de::Error),

    #[error("config write error: {0}")]
    TomlSer(#[from] toml::ser::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
