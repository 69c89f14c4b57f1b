//! Differential reverse proxy: runs an unpatched (main) and a patched (shadow)
//! instance of a web application side by side, compares their responses and
//! raises alarms on unexpected divergence.

pub mod comparator;
pub mod config;
pub mod fixture;
pub mod learning;
pub mod logs;
pub mod message;
pub mod pairing;
pub mod proxy;
pub mod reliability;
pub mod script;
pub mod value_map;

pub use comparator::{
    classify, compare_json, compare_pair, compare_text, extract_context, tags_equal_normalized,
    Classification, CompareOptions, Comparator, ComparisonOutcome, ContextKind, DifferenceContext,
    DifferenceToken, Verdict,
};
pub use config::{parse_config, serialize_config, ConfigError, RuleSet};
pub use message::{Headers, MediaType, Request, RequestSummary, Response};
pub use pairing::{PairKey, PairStore, PairingError, ResponsePair, Side};
pub use proxy::{Mode, ProxyConfig, ProxyError, ProxyHandle, Upstream};
pub use value_map::{rewrite_request, SessionId, Substitutions, ValueBinding, ValueStore};
pub use learning::{format_special, suggest_rules, DifferenceRecord, RuleCandidate};
pub use logs::{LogEntry, LogWriter};
pub use reliability::{
    decision_report, estimate_lambda, standard_error, survival_probability, DecisionReport,
    ObservationLog, ReliabilityError,
};
