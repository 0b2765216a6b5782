use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("grid needs at least 2 sites, got {0}")]
    TooFewSites(usize),

    #[error("grid size mismatch: expected {expected}, got {got}")]
    SizeMismatch { expected: usize, got: usize },

    #[error("input is not mean-free: mean {mean:e} exceeds tolerance {tol:e}")]
    NotMeanFree { mean: f64, tol: f64 },

    #[error("time went backwards: {from} -> {to}")]
    NonMonotoneTime { from: f64, to: f64 },

    #[error("degenerate diffusion: d1 * d2 must be non-zero (d1 = {d1}, d2 = {d2})")]
    DegenerateDiffusion { d1: f64, d2: f64 },

    #[error("step rejected: dt = {dt:e} exceeds stability limit {limit:e}")]
    StepRejected { dt: f64, limit: f64 },

    #[error("negativity fault: {clipped} of {sites} sites fell below the positivity floor")]
    NegativityFault { clipped: usize, sites: usize },

    #[error("smallness condition violated at t = {t}: sup u * sup v = {product} >= {threshold}")]
    SmallnessViolated { t: f64, product: f64, threshold: f64 },

    #[error("population extinct at t = {t}")]
    Extinct { t: f64 },

    #[error("total event rate {rate:e} exceeds budget {budget:e}")]
    RateOverflow { rate: f64, budget: f64 },

    #[error("tau-leap negativity rejection rate {rate:.4} above 1%")]
    LeapRejected { rate: f64 },

    #[error("need at least {needed} replicas, got {got}")]
    InsufficientReplicas { needed: usize, got: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
