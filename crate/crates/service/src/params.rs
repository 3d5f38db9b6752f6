use std::collections::HashMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use trainscope::anomaly::{DEFAULT_MIN_FRACTION, DEFAULT_TOP_K, DEFAULT_WINDOW};
use trainscope::clustering::DEFAULT_CLUSTERS;
use trainscope::correlation::GridParams;
use trainscope::stats::NormalizeMode;

use crate::{ServiceError, ServiceResult};

/// Parameters shared by every query. `normalize: None` means raw change
/// degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryParams {
    pub k: usize,
    pub min_fraction: f64,
    pub top_k: usize,
    pub min_appearance: usize,
    pub normalize: Option<NormalizeMode>,
    pub cluster_k: usize,
    pub seed: u64,
}

impl Default for QueryParams {
    fn default() -> Self {
        QueryParams {
            k: DEFAULT_WINDOW,
            min_fraction: DEFAULT_MIN_FRACTION,
            top_k: DEFAULT_TOP_K,
            min_appearance: 1,
            normalize: Some(NormalizeMode::Filter),
            cluster_k: DEFAULT_CLUSTERS,
            seed: 0,
        }
    }
}

pub(crate) fn parse<T: FromStr>(q: &HashMap<String, String>, key: &str) -> ServiceResult<Option<T>> {
    q.get(key)
        .map(|v| {
            v.parse()
                .map_err(|_| ServiceError::BadRequest(format!("cannot parse `{key}` from `{v}`")))
        })
        .transpose()
}

impl QueryParams {
    /// Reads the shared parameters from a query string map, falling back to
    /// defaults, and validates them.
    pub fn from_query(q: &HashMap<String, String>) -> ServiceResult<Self> {
        let d = QueryParams::default();
        let normalize = match q.get("normalize").map(String::as_str) {
            None => d.normalize,
            Some("raw") | Some("none") => None,
            Some(other) => Some(other.parse().map_err(ServiceError::Core)?),
        };
        let p = QueryParams {
            k: parse(q, "k")?.unwrap_or(d.k),
            min_fraction: parse(q, "min_fraction")?.unwrap_or(d.min_fraction),
            top_k: parse(q, "top_k")?.unwrap_or(d.top_k),
            min_appearance: parse(q, "min_appearance")?.unwrap_or(d.min_appearance),
            normalize,
            cluster_k: parse(q, "cluster_k")?.unwrap_or(d.cluster_k),
            seed: parse(q, "seed")?.unwrap_or(d.seed),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> ServiceResult<()> {
        let bad = |m: &str| Err(ServiceError::BadRequest(m.to_string()));
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        if !(self.min_fraction > 0.0 && self.min_fraction <= 1.0) {
            return bad("min_fraction must lie in (0, 1]");
        }
        if self.top_k == 0 {
            return bad("top_k must be at least 1");
        }
        if self.min_appearance == 0 {
            return bad("min_appearance must be at least 1");
        }
        if self.cluster_k == 0 {
            return bad("cluster_k must be at least 1");
        }
        Ok(())
    }

    pub fn grid(&self) -> GridParams {
        GridParams {
            k: self.k,
            min_fraction: self.min_fraction,
            top_k: self.top_k,
            min_appearance: self.min_appearance,
        }
    }
}
