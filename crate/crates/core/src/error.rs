use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("event scheduled in the past: now={now}, requested={time}")]
    ScheduleInPast { now: f64, time: f64 },
    #[error("livelock: clock stuck at {time} s for {events} consecutive events")]
    Livelock { time: f64, events: u64 },
    #[error("unknown data item `{0}`")]
    UnknownDataItem(String),
    #[error("unknown function class `{0}`")]
    UnknownClass(String),
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error("run did not drain: {0}")]
    NotDrained(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QueueingError {
    #[error("unstable system: offered load {load} >= servers {servers}")]
    Unstable { servers: f64, load: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BestReplyError {
    #[error("infeasible flow {lambda} >= total residual capacity {capacity}")]
    Infeasible { lambda: f64, capacity: f64 },
}
