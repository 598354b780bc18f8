//! Server–user topologies under per-server compute and fan-out budgets.
//!
//! Ids are 0-based in memory. Every file format reads and writes 1-based ids.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sizes and budgets of one system instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    /// Number of users.
    #[serde(rename = "K")]
    pub users: usize,
    /// Number of servers.
    #[serde(rename = "N")]
    pub servers: usize,
    /// Number of subfunctions.
    #[serde(rename = "L")]
    pub subfunctions: usize,
    /// Subfunctions computed per server.
    #[serde(rename = "Gamma")]
    pub compute_budget: usize,
    /// Users reached per server.
    #[serde(rename = "Delta")]
    pub fanout_budget: usize,
    /// Shots per server.
    #[serde(rename = "T")]
    pub shots: usize,
    /// Re-draw link sets independently for every shot.
    #[serde(default)]
    pub per_shot_links: bool,
}

impl SystemConfig {
    pub fn new(
        users: usize,
        servers: usize,
        subfunctions: usize,
        compute_budget: usize,
        fanout_budget: usize,
        shots: usize,
    ) -> Result<Self> {
        let cfg = Self {
            users,
            servers,
            subfunctions,
            compute_budget,
            fanout_budget,
            shots,
            per_shot_links: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("K", self.users),
            ("N", self.servers),
            ("L", self.subfunctions),
            ("T", self.shots),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("system.{key} must be positive")));
            }
        }
        if self.compute_budget < 1 || self.compute_budget > self.subfunctions {
            return Err(Error::Config(format!(
                "system.Gamma = {} must lie in 1..={}",
                self.compute_budget, self.subfunctions
            )));
        }
        if self.fanout_budget < 1 || self.fanout_budget > self.users {
            return Err(Error::Config(format!(
                "system.Delta = {} must lie in 1..={}",
                self.fanout_budget, self.users
            )));
        }
        Ok(())
    }

    /// Replication fraction Γ/L.
    pub fn gamma(&self) -> f64 {
        self.compute_budget as f64 / self.subfunctions as f64
    }

    /// Fan-out fraction Δ/K.
    pub fn delta(&self) -> f64 {
        self.fanout_budget as f64 / self.users as f64
    }

    /// Expected received-feature count T·N·δ.
    pub fn expected_received(&self) -> f64 {
        self.shots as f64 * self.servers as f64 * self.delta()
    }
}

/// Realized assignment and link sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    /// `assignment[n]` is the sorted coordinate set S_n.
    pub assignment: Vec<Vec<usize>>,
    /// `links[n]` is the sorted user set T_n shared by every shot.
    pub links: Vec<Vec<usize>>,
    /// Per-shot link sets `[n][t]`, present only in the per-shot variant.
    pub shot_links: Option<Vec<Vec<Vec<usize>>>>,
}

/// Ordered list of `(server, shot)` pairs delivered to one user.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReceivedIndex {
    pub user: usize,
    pub pairs: Vec<(usize, usize)>,
}

impl ReceivedIndex {
    pub fn m(&self) -> usize {
        self.pairs.len()
    }
}

/// Coverage verdict for one user.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Coverage {
    pub user: usize,
    pub covered: bool,
    /// Essential coordinates never both computed and delivered.
    pub missed: Vec<usize>,
}

/// Uniform size-`k` subset of `0..n` by partial Fisher–Yates, returned sorted.
pub fn uniform_subset<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Vec<usize> {
    debug_assert!(k <= n);
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.random_range(i..n);
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool.sort_unstable();
    pool
}

/// Draws S_1..S_N i.i.d. uniform over size-Γ subsets of the coordinates.
pub fn sample_assignment<R: Rng + ?Sized>(config: &SystemConfig, rng: &mut R) -> Vec<Vec<usize>> {
    (0..config.servers)
        .map(|_| uniform_subset(config.subfunctions, config.compute_budget, rng))
        .collect()
}

/// Draws T_1..T_N i.i.d. uniform over size-Δ subsets of the users.
pub fn sample_links<R: Rng + ?Sized>(config: &SystemConfig, rng: &mut R) -> Vec<Vec<usize>> {
    (0..config.servers)
        .map(|_| uniform_subset(config.users, config.fanout_budget, rng))
        .collect()
}

fn sample_shot_links<R: Rng + ?Sized>(config: &SystemConfig, rng: &mut R) -> Vec<Vec<Vec<usize>>> {
    (0..config.servers)
        .map(|_| {
            (0..config.shots)
                .map(|_| uniform_subset(config.users, config.fanout_budget, rng))
                .collect()
        })
        .collect()
}

impl Topology {
    /// Samples a full topology from the uniform ensemble. Assignment and
    /// links come from separate streams so either can be re-drawn alone.
    pub fn sample<R: Rng + ?Sized>(
        config: &SystemConfig,
        assign_rng: &mut R,
        link_rng: &mut R,
    ) -> Self {
        let assignment = sample_assignment(config, assign_rng);
        if config.per_shot_links {
            let shot_links = sample_shot_links(config, link_rng);
            let links = shot_links.iter().map(|s| union_sorted(s)).collect();
            Self {
                assignment,
                links,
                shot_links: Some(shot_links),
            }
        } else {
            Self {
                assignment,
                links: sample_links(config, link_rng),
                shot_links: None,
            }
        }
    }

    /// Builds a fixed topology, normalizing every set to sorted and
    /// duplicate-free and checking the budgets (sizes may be below budget).
    pub fn from_sets(
        config: &SystemConfig,
        assignment: Vec<Vec<usize>>,
        links: Vec<Vec<usize>>,
    ) -> Result<Self> {
        if assignment.len() != config.servers || links.len() != config.servers {
            return Err(Error::Config(format!(
                "expected {} assignment and link sets, got {} and {}",
                config.servers,
                assignment.len(),
                links.len()
            )));
        }
        let norm = |mut v: Vec<usize>| {
            v.sort_unstable();
            v.dedup();
            v
        };
        let assignment: Vec<Vec<usize>> = assignment.into_iter().map(norm).collect();
        let links: Vec<Vec<usize>> = links.into_iter().map(norm).collect();
        for (n, s) in assignment.iter().enumerate() {
            if s.len() > config.compute_budget {
                return Err(Error::Config(format!(
                    "server {} computes {} > Gamma = {}",
                    n + 1,
                    s.len(),
                    config.compute_budget
                )));
            }
            if s.iter().any(|&l| l >= config.subfunctions) {
                return Err(Error::Config(format!("server {} has coordinate out of range", n + 1)));
            }
        }
        for (n, t) in links.iter().enumerate() {
            if t.len() > config.fanout_budget {
                return Err(Error::Config(format!(
                    "server {} links {} > Delta = {}",
                    n + 1,
                    t.len(),
                    config.fanout_budget
                )));
            }
            if t.iter().any(|&k| k >= config.users) {
                return Err(Error::Config(format!("server {} links unknown user", n + 1)));
            }
        }
        Ok(Self {
            assignment,
            links,
            shot_links: None,
        })
    }

    fn linked(&self, n: usize, t: usize, k: usize) -> bool {
        match &self.shot_links {
            Some(sl) => sl[n][t].binary_search(&k).is_ok(),
            None => self.links[n].binary_search(&k).is_ok(),
        }
    }

    /// Received features of user `k`, sorted by `(server, shot)`.
    pub fn received_index(&self, config: &SystemConfig, k: usize) -> Result<ReceivedIndex> {
        if k >= config.users {
            return Err(Error::UnknownUser(k + 1));
        }
        let mut pairs = Vec::new();
        for n in 0..self.assignment.len() {
            for t in 0..config.shots {
                if self.linked(n, t, k) {
                    pairs.push((n, t));
                }
            }
        }
        Ok(ReceivedIndex { user: k, pairs })
    }

    /// m_k for every user.
    pub fn received_counts(&self, config: &SystemConfig) -> Vec<usize> {
        (0..config.users)
            .map(|k| self.received_index(config, k).map(|r| r.m()).unwrap_or(0))
            .collect()
    }

    /// Number of servers linking to user `k` (in any shot).
    pub fn server_degree(&self, k: usize) -> usize {
        self.links.iter().filter(|t| t.binary_search(&k).is_ok()).count()
    }

    /// Coordinates that reach user `k` through at least one server.
    pub fn visible_coordinates(&self, k: usize) -> Vec<usize> {
        let sets: Vec<Vec<usize>> = self
            .links
            .iter()
            .zip(&self.assignment)
            .filter(|(t, _)| t.binary_search(&k).is_ok())
            .map(|(_, s)| s.clone())
            .collect();
        union_sorted(&sets)
    }

    /// Serializes to the line-oriented topology file format.
    pub fn to_text(&self, config: &SystemConfig) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "K {}", config.users);
        let _ = writeln!(out, "N {}", config.servers);
        let _ = writeln!(out, "L {}", config.subfunctions);
        let _ = writeln!(out, "Gamma {}", config.compute_budget);
        let _ = writeln!(out, "Delta {}", config.fanout_budget);
        let _ = writeln!(out, "T {}", config.shots);
        for (n, s) in self.assignment.iter().enumerate() {
            let _ = write!(out, "S {}", n + 1);
            for l in s {
                let _ = write!(out, " {}", l + 1);
            }
            out.push('\n');
        }
        for (n, t) in self.links.iter().enumerate() {
            let _ = write!(out, "T {}", n + 1);
            for k in t {
                let _ = write!(out, " {}", k + 1);
            }
            out.push('\n');
        }
        out
    }

    /// Parses the topology file format.
    ///
    /// The six header keys come first; after all of them are seen, lines
    /// starting with `T` are link lines. `#` starts a comment.
    pub fn parse(text: &str) -> Result<(SystemConfig, Self)> {
        let mut header: [Option<usize>; 6] = [None; 6];
        const KEYS: [&str; 6] = ["K", "N", "L", "Gamma", "Delta", "T"];
        let mut config: Option<SystemConfig> = None;
        let mut assignment: Vec<Option<Vec<usize>>> = Vec::new();
        let mut links: Vec<Option<Vec<usize>>> = Vec::new();

        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let mut tokens = content.split_whitespace();
            let key = tokens.next().unwrap_or_default();
            let nums: Vec<usize> = tokens
                .map(|t| {
                    t.parse::<usize>().map_err(|_| Error::TopologyParse {
                        line,
                        msg: format!("`{t}` is not a nonnegative integer"),
                    })
                })
                .collect::<Result<_>>()?;

            let Some(cfg) = config else {
                let Some(pos) = KEYS.iter().position(|k| *k == key) else {
                    return Err(Error::TopologyParse {
                        line,
                        msg: format!("expected a header key, found `{key}`"),
                    });
                };
                if nums.len() != 1 {
                    return Err(Error::TopologyParse {
                        line,
                        msg: format!("header key `{key}` takes exactly one value"),
                    });
                }
                if header[pos].is_some() {
                    return Err(Error::TopologyParse {
                        line,
                        msg: format!("duplicate header key `{key}`"),
                    });
                }
                header[pos] = Some(nums[0]);
                if header.iter().all(Option::is_some) {
                    let h: Vec<usize> = header.iter().map(|v| v.unwrap()).collect();
                    let cfg = SystemConfig::new(h[0], h[1], h[2], h[3], h[4], h[5]).map_err(|e| {
                        Error::TopologyParse {
                            line,
                            msg: e.to_string(),
                        }
                    })?;
                    assignment = vec![None; cfg.servers];
                    links = vec![None; cfg.servers];
                    config = Some(cfg);
                }
                continue;
            };

            let (limit, budget, what, table) = match key {
                "S" => (cfg.subfunctions, cfg.compute_budget, "Gamma", &mut assignment),
                "T" => (cfg.users, cfg.fanout_budget, "Delta", &mut links),
                other => {
                    return Err(Error::TopologyParse {
                        line,
                        msg: format!("unknown record `{other}`"),
                    })
                }
            };
            let Some((&n, ids)) = nums.split_first() else {
                return Err(Error::TopologyParse {
                    line,
                    msg: "missing server id".into(),
                });
            };
            if n == 0 || n > cfg.servers {
                return Err(Error::TopologyParse {
                    line,
                    msg: format!("server id {n} outside 1..={}", cfg.servers),
                });
            }
            let mut set = Vec::with_capacity(ids.len());
            for &id in ids {
                if id == 0 || id > limit {
                    return Err(Error::TopologyParse {
                        line,
                        msg: format!("id {id} outside 1..={limit}"),
                    });
                }
                set.push(id - 1);
            }
            set.sort_unstable();
            set.dedup();
            if set.len() > budget {
                return Err(Error::TopologyParse {
                    line,
                    msg: format!("server {n} has {} entries, exceeding {what} = {budget}", set.len()),
                });
            }
            if table[n - 1].replace(set).is_some() {
                return Err(Error::TopologyParse {
                    line,
                    msg: format!("duplicate `{key}` record for server {n}"),
                });
            }
        }

        let Some(cfg) = config else {
            return Err(Error::TopologyParse {
                line: text.lines().count(),
                msg: "incomplete header".into(),
            });
        };
        let last = text.lines().count();
        let fill = |table: Vec<Option<Vec<usize>>>, key: &str| -> Result<Vec<Vec<usize>>> {
            table
                .into_iter()
                .enumerate()
                .map(|(n, s)| {
                    s.ok_or_else(|| Error::TopologyParse {
                        line: last,
                        msg: format!("missing `{key}` record for server {}", n + 1),
                    })
                })
                .collect()
        };
        let topo = Topology {
            assignment: fill(assignment, "S")?,
            links: fill(links, "T")?,
            shot_links: None,
        };
        Ok((cfg, topo))
    }
}

fn union_sorted(sets: &[Vec<usize>]) -> Vec<usize> {
    let mut all: Vec<usize> = sets.iter().flatten().copied().collect();
    all.sort_unstable();
    all.dedup();
    all
}

/// For each user, which essential coordinates are both computed and
/// delivered by some server.
pub fn check_coverage(topology: &Topology, essential_sets: &[Vec<usize>]) -> Vec<Coverage> {
    essential_sets
        .iter()
        .enumerate()
        .map(|(k, essential)| {
            let visible = topology.visible_coordinates(k);
            let missed: Vec<usize> = essential
                .iter()
                .copied()
                .filter(|l| visible.binary_search(l).is_err())
                .collect();
            Coverage {
                user: k,
                covered: missed.is_empty(),
                missed,
            }
        })
        .collect()
}
