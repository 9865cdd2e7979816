//! Shared data model: transitions, cluster blocks, datasets, and the
//! experiment configuration.
//!
//! A [`Dataset`] is the unit every learner consumes: `n_clusters * horizon`
//! cluster blocks, each holding the transitions of all `cluster_size`
//! members of one cluster at one decision time. Cluster sizes are equal by
//! construction; ragged clusters are rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One state-action-reward-next-state tuple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_state: Vec<f64>,
}

impl Transition {
    pub fn state_dim(&self) -> usize {
        self.state.len()
    }
}

/// All members of one cluster observed at one decision time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterBlock {
    pub cluster_id: usize,
    pub time: usize,
    pub members: Vec<Transition>,
}

impl ClusterBlock {
    pub fn cluster_size(&self) -> usize {
        self.members.len()
    }
}

/// A clustered offline dataset.
///
/// Invariants (checked by [`Dataset::new`]): every block has exactly
/// `cluster_size` members, every member's state and next state have
/// `state_dim` coordinates, every action index is below `action_count`,
/// and there is exactly one block per (cluster, time) pair, so
/// `blocks.len() == n_clusters * horizon`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    blocks: Vec<ClusterBlock>,
    n_clusters: usize,
    cluster_size: usize,
    horizon: usize,
    action_count: usize,
    state_dim: usize,
}

impl Dataset {
    pub fn new(blocks: Vec<ClusterBlock>, action_count: usize) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::Input("dataset has no blocks".into()));
        }
        let cluster_size = blocks[0].members.len();
        if cluster_size == 0 {
            return Err(Error::Input("cluster blocks must be nonempty".into()));
        }
        let state_dim = blocks[0].members[0].state.len();
        let mut seen: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for block in &blocks {
            if block.members.len() != cluster_size {
                return Err(Error::Input(format!(
                    "ragged clusters rejected: block ({}, {}) has {} members, expected {}",
                    block.cluster_id,
                    block.time,
                    block.members.len(),
                    cluster_size
                )));
            }
            for tr in &block.members {
                if tr.state.len() != state_dim || tr.next_state.len() != state_dim {
                    return Err(Error::Input(format!(
                        "state dimension mismatch in block ({}, {})",
                        block.cluster_id, block.time
                    )));
                }
                if tr.action >= action_count {
                    return Err(Error::Input(format!(
                        "action {} out of range (action_count = {})",
                        tr.action, action_count
                    )));
                }
            }
            seen.entry(block.cluster_id).or_default().push(block.time);
        }
        let n_clusters = seen.len();
        let horizon = blocks.len() / n_clusters;
        if n_clusters * horizon != blocks.len() {
            return Err(Error::Input(
                "blocks do not form a complete n_clusters x horizon grid".into(),
            ));
        }
        for (cid, mut times) in seen {
            times.sort_unstable();
            if times.len() != horizon || times.iter().enumerate().any(|(i, &t)| i != t) {
                return Err(Error::Input(format!(
                    "cluster {cid} does not contribute one block per time 0..{horizon}"
                )));
            }
        }
        Ok(Dataset {
            blocks,
            n_clusters,
            cluster_size,
            horizon,
            action_count,
            state_dim,
        })
    }

    pub fn blocks(&self) -> &[ClusterBlock] {
        &self.blocks
    }

    /// Number of (S,A,R,S') tuple batches, i.e. blocks.
    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn n_clusters(&self) -> usize {
        self.n_clusters
    }

    pub fn cluster_size(&self) -> usize {
        self.cluster_size
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn action_count(&self) -> usize {
        self.action_count
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    /// Total flattened tuple count, `n_blocks * cluster_size`.
    pub fn n_tuples(&self) -> usize {
        self.blocks.len() * self.cluster_size
    }

    /// Iterate over all transitions in block order, member order within.
    pub fn tuples(&self) -> impl Iterator<Item = &Transition> {
        self.blocks.iter().flat_map(|b| b.members.iter())
    }

    /// Restrict to a subset of clusters, renumbering nothing; block order
    /// is preserved. Used for cluster-level cross-validation folds.
    pub fn filter_clusters(&self, keep: &[usize]) -> Result<Dataset> {
        let keep_set: std::collections::BTreeSet<usize> = keep.iter().copied().collect();
        let blocks: Vec<ClusterBlock> = self
            .blocks
            .iter()
            .filter(|b| keep_set.contains(&b.cluster_id))
            .cloned()
            .collect();
        Dataset::new(blocks, self.action_count)
    }

    /// Write the dataset as CSV with header
    /// `cluster_id,time,member,action,reward,state_0..,next_state_0..`.
    /// Floating point is written with 17 significant digits so finite
    /// values round-trip bit-exactly.
    pub fn to_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string())?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        out.push_str("cluster_id,time,member,action,reward");
        for j in 0..self.state_dim {
            let _ = write!(out, ",state_{j}");
        }
        for j in 0..self.state_dim {
            let _ = write!(out, ",next_state_{j}");
        }
        out.push('\n');
        for block in &self.blocks {
            for (m, tr) in block.members.iter().enumerate() {
                let _ = write!(
                    out,
                    "{},{},{},{},{}",
                    block.cluster_id,
                    block.time,
                    m,
                    tr.action,
                    fmt_f64(tr.reward)
                );
                for v in &tr.state {
                    let _ = write!(out, ",{}", fmt_f64(*v));
                }
                for v in &tr.next_state {
                    let _ = write!(out, ",{}", fmt_f64(*v));
                }
                out.push('\n');
            }
        }
        out
    }

    /// Read a dataset back from the CSV format written by [`Dataset::to_csv`].
    ///
    /// `action_count` defaults to `max action + 1` when not supplied.
    pub fn from_csv(path: &Path, action_count: Option<usize>) -> Result<Dataset> {
        let text = std::fs::read_to_string(path)?;
        Self::from_csv_str(&text, action_count)
    }

    pub fn from_csv_str(text: &str, action_count: Option<usize>) -> Result<Dataset> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            msg: "empty file".into(),
        })?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 7 || cols[..5] != ["cluster_id", "time", "member", "action", "reward"] {
            return Err(Error::Parse {
                line: 1,
                msg: "unexpected header".into(),
            });
        }
        let state_dim = (cols.len() - 5) / 2;
        if 5 + 2 * state_dim != cols.len() {
            return Err(Error::Parse {
                line: 1,
                msg: "state and next_state column counts differ".into(),
            });
        }
        let mut rows: BTreeMap<(usize, usize), Vec<(usize, Transition)>> = BTreeMap::new();
        let mut max_action = 0usize;
        for (idx, line) in lines {
            if line.is_empty() {
                continue;
            }
            let lineno = idx + 1;
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != cols.len() {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("expected {} fields, got {}", cols.len(), fields.len()),
                });
            }
            let parse_usize = |s: &str| {
                s.parse::<usize>().map_err(|e| Error::Parse {
                    line: lineno,
                    msg: format!("bad integer {s:?}: {e}"),
                })
            };
            let parse_f64 = |s: &str| {
                s.parse::<f64>().map_err(|e| Error::Parse {
                    line: lineno,
                    msg: format!("bad float {s:?}: {e}"),
                })
            };
            let cluster_id = parse_usize(fields[0])?;
            let time = parse_usize(fields[1])?;
            let member = parse_usize(fields[2])?;
            let action = parse_usize(fields[3])?;
            max_action = max_action.max(action);
            let reward = parse_f64(fields[4])?;
            let state = fields[5..5 + state_dim]
                .iter()
                .map(|s| parse_f64(s))
                .collect::<Result<Vec<f64>>>()?;
            let next_state = fields[5 + state_dim..]
                .iter()
                .map(|s| parse_f64(s))
                .collect::<Result<Vec<f64>>>()?;
            rows.entry((cluster_id, time)).or_default().push((
                member,
                Transition {
                    state,
                    action,
                    reward,
                    next_state,
                },
            ));
        }
        let mut blocks = Vec::with_capacity(rows.len());
        for ((cluster_id, time), mut members) in rows {
            members.sort_by_key(|(m, _)| *m);
            blocks.push(ClusterBlock {
                cluster_id,
                time,
                members: members.into_iter().map(|(_, tr)| tr).collect(),
            });
        }
        Dataset::new(blocks, action_count.unwrap_or(max_action + 1))
    }
}

/// 17 significant digits: enough that every finite f64 round-trips.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Parameters of one experiment cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub n_clusters: usize,
    pub cluster_size: usize,
    pub horizon: usize,
    /// Intra-cluster correlation scale for the semi-synthetic family.
    pub psi: f64,
    /// Discount factor, in [0, 1).
    pub gamma: f64,
    /// Polynomial degree of the state feature block.
    pub degree: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
    pub replications: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            n_clusters: 5,
            cluster_size: 5,
            horizon: 5,
            psi: 1.0,
            gamma: 0.5,
            degree: 2,
            max_iters: 100,
            tol: 1e-6,
            seed: 42,
            replications: 50,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clusters < 1 || self.cluster_size < 1 || self.horizon < 1 {
            return Err(Error::Config("all counts must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!(
                "gamma must lie in [0, 1), got {}",
                self.gamma
            )));
        }
        if self.psi < 0.0 {
            return Err(Error::Config("psi must be >= 0".into()));
        }
        if self.degree < 1 {
            return Err(Error::Config("degree must be >= 1".into()));
        }
        if self.max_iters < 1 || self.replications < 1 {
            return Err(Error::Config("max_iters and replications must be >= 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config("tol must be > 0".into()));
        }
        Ok(())
    }
}
