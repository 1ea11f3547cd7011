//! CPU topology discovery and NUMA-aware worker-to-core binding.
//!
//! Binding plans are expressed in a canonical logical-CPU numbering: thread 0
//! of every core comes first, node by node (`0..γ`), then thread 1 of every
//! core in the same order (`γ..2γ`). [`Topology`] keeps a translation table
//! from canonical ids to the ids the operating system uses, since real
//! machines enumerate CPUs in many different ways.
//!
//! Binding is best effort. A failure to pin a worker is logged and the worker
//! keeps running unpinned; results never depend on placement.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{HdError, Result};

/// Environment variable that replaces the detected topology, e.g.
/// `gamma=8,eta=4,smt=2` or `8x4x2`.
pub const TOPOLOGY_ENV: &str = "HDPIPE_TOPOLOGY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TopologySource {
    Detected,
    Override,
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    /// Physical cores.
    pub gamma: usize,
    /// NUMA nodes.
    pub eta: usize,
    /// Hardware threads per core.
    pub smt: usize,
    /// Cores on each node, in node order.
    pub node_cores: Vec<usize>,
    /// Canonical logical CPU id to OS CPU id.
    pub os_cpu: Vec<usize>,
    pub source: TopologySource,
}

impl Topology {
    /// A synthetic machine with identity OS numbering. Cores are split as
    /// evenly as possible across nodes.
    pub fn synthetic(gamma: usize, eta: usize, smt: usize) -> Result<Self> {
        if gamma == 0 || eta == 0 || smt == 0 {
            return Err(HdError::config(format!(
                "topology needs positive gamma/eta/smt, got {gamma}/{eta}/{smt}"
            )));
        }
        if eta > gamma {
            return Err(HdError::config(format!(
                "{eta} NUMA nodes cannot hold {gamma} cores"
            )));
        }
        let node_cores = (0..eta)
            .map(|l| (l + 1) * gamma / eta - l * gamma / eta)
            .collect();
        Ok(Topology {
            gamma,
            eta,
            smt,
            node_cores,
            os_cpu: (0..gamma * smt).collect(),
            source: TopologySource::Override,
        })
    }

    /// Parses `gamma=8,eta=4,smt=2`, `8x4x2` or `8x4` (smt defaults to 2).
    pub fn parse_override(spec: &str) -> Result<Self> {
        let bad = || HdError::Parse {
            what: "topology override",
            detail: format!("{spec:?}; expected e.g. gamma=8,eta=4,smt=2 or 8x4x2"),
        };
        let spec = spec.trim();
        let (mut gamma, mut eta, mut smt) = (None, None, Some(2));
        if spec.contains('=') {
            for part in spec.split(',') {
                let (k, v) = part.split_once('=').ok_or_else(bad)?;
                let v: usize = v.trim().parse().map_err(|_| bad())?;
                match k.trim() {
                    "gamma" | "cores" => gamma = Some(v),
                    "eta" | "nodes" => eta = Some(v),
                    "smt" => smt = Some(v),
                    _ => return Err(bad()),
                }
            }
        } else {
            let parts: Vec<usize> = spec
                .split('x')
                .map(|p| p.trim().parse().map_err(|_| bad()))
                .collect::<Result<_>>()?;
            match parts[..] {
                [g, e] => (gamma, eta) = (Some(g), Some(e)),
                [g, e, s] => (gamma, eta, smt) = (Some(g), Some(e), Some(s)),
                _ => return Err(bad()),
            }
        }
        Topology::synthetic(
            gamma.ok_or_else(bad)?,
            eta.ok_or_else(bad)?,
            smt.ok_or_else(bad)?,
        )
    }

    pub fn logical_cpu_count(&self) -> usize {
        self.gamma * self.smt
    }

    /// True when every node has the same number of cores.
    pub fn is_uniform(&self) -> bool {
        self.gamma.is_multiple_of(self.eta) && self.node_cores.iter().all(|&c| c == self.gamma / self.eta)
    }

    pub fn degraded(&self) -> bool {
        self.source == TopologySource::Fallback
    }

    /// NUMA node of a canonical logical CPU id.
    pub fn node_of(&self, canonical: usize) -> usize {
        let mut core = canonical % self.gamma;
        for (node, &count) in self.node_cores.iter().enumerate() {
            if core < count {
                return node;
            }
            core -= count;
        }
        unreachable!("canonical id {canonical} out of range")
    }

    /// Short label used in benchmark output.
    pub fn summary(&self) -> String {
        let tag = match self.source {
            TopologySource::Detected => "",
            TopologySource::Override => ":override",
            TopologySource::Fallback => ":degraded",
        };
        format!("{}c{}n{}t{}", self.gamma, self.eta, self.smt, tag)
    }
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} cores, {} NUMA nodes, {} threads/core ({:?})",
            self.gamma, self.eta, self.smt, self.source
        )
    }
}

/// Reads the machine topology, honoring [`TOPOLOGY_ENV`].
///
/// Never fails: when the OS does not expose enough information a single-node
/// topology is returned with [`TopologySource::Fallback`].
pub fn discover_topology() -> Topology {
    if let Ok(spec) = std::env::var(TOPOLOGY_ENV) {
        match Topology::parse_override(&spec) {
            Ok(t) => return t,
            Err(e) => log::warn!("ignoring {TOPOLOGY_ENV}: {e}"),
        }
    }
    let allowed = current_affinity();
    match read_sysfs(Path::new("/sys/devices/system"), allowed.as_deref()) {
        Some(t) => t,
        None => fallback_topology(),
    }
}

fn fallback_topology() -> Topology {
    let logical = std::thread::available_parallelism().map_or(1, |n| n.get());
    // Assume SMT pairs when the count allows it.
    let smt = if logical >= 2 && logical.is_multiple_of(2) { 2 } else { 1 };
    let gamma = logical / smt;
    Topology {
        gamma,
        eta: 1,
        smt,
        node_cores: vec![gamma],
        os_cpu: (0..logical).collect(),
        source: TopologySource::Fallback,
    }
}

pub(crate) fn parse_cpu_list(s: &str) -> Option<Vec<usize>> {
    let mut out = Vec::new();
    for part in s.trim().split(',').filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (usize, usize) = (a.parse().ok()?, b.parse().ok()?);
                out.extend(a..=b);
            }
            None => out.push(part.parse().ok()?),
        }
    }
    Some(out)
}

fn read_trimmed(path: &Path) -> Option<String> {
    fs::read_to_string(path).ok().map(|s| s.trim().to_string())
}

/// Builds a topology from a sysfs tree rooted at `root`
/// (normally `/sys/devices/system`).
pub(crate) fn read_sysfs(root: &Path, allowed: Option<&[usize]>) -> Option<Topology> {
    let mut cpus = parse_cpu_list(&read_trimmed(&root.join("cpu/online"))?)?;
    if let Some(allowed) = allowed {
        cpus.retain(|c| allowed.contains(c));
    }
    if cpus.is_empty() {
        return None;
    }

    let mut cpu_node = BTreeMap::new();
    if let Ok(entries) = fs::read_dir(root.join("node")) {
        for entry in entries.flatten() {
            let name = entry.file_name().to_string_lossy().into_owned();
            let Some(id) = name.strip_prefix("node").and_then(|s| s.parse::<usize>().ok()) else {
                continue;
            };
            if let Some(list) = read_trimmed(&entry.path().join("cpulist")).and_then(|s| parse_cpu_list(&s)) {
                for c in list {
                    cpu_node.insert(c, id);
                }
            }
        }
    }

    // (node, package, core) -> hardware threads
    let mut cores: BTreeMap<(usize, usize, usize), Vec<usize>> = BTreeMap::new();
    for &cpu in &cpus {
        let topo = root.join(format!("cpu/cpu{cpu}/topology"));
        let core_id = read_trimmed(&topo.join("core_id"))?.parse().ok()?;
        let package = read_trimmed(&topo.join("physical_package_id"))
            .and_then(|s| s.parse().ok())
            .unwrap_or(0);
        let node = cpu_node.get(&cpu).copied().unwrap_or(0);
        cores.entry((node, package, core_id)).or_default().push(cpu);
    }

    let mut by_node: BTreeMap<usize, Vec<Vec<usize>>> = BTreeMap::new();
    for ((node, _, _), mut threads) in cores {
        threads.sort_unstable();
        by_node.entry(node).or_default().push(threads);
    }
    for list in by_node.values_mut() {
        list.sort_by_key(|t| t[0]);
    }

    let smt = by_node.values().flatten().map(Vec::len).min()?.max(1);
    let node_cores: Vec<usize> = by_node.values().map(Vec::len).collect();
    let gamma: usize = node_cores.iter().sum();
    let mut os_cpu = vec![0; gamma * smt];
    for (core, threads) in by_node.values().flatten().enumerate() {
        for (thread, &cpu) in threads.iter().take(smt).enumerate() {
            os_cpu[thread * gamma + core] = cpu;
        }
    }
    Some(Topology {
        gamma,
        eta: node_cores.len(),
        smt,
        node_cores,
        os_cpu,
        source: TopologySource::Detected,
    })
}

/// Canonical logical CPU ids for each worker of each stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BindingPlan {
    pub stage1: Vec<usize>,
    pub stage2: Vec<usize>,
    /// Set when the node-parity mapping could not be applied and workers
    /// were spread round-robin instead.
    pub fallback: bool,
}

impl BindingPlan {
    /// OS CPU ids for stage I workers.
    pub fn stage1_os(&self, topo: &Topology) -> Vec<usize> {
        self.stage1.iter().map(|&c| topo.os_cpu[c]).collect()
    }

    /// OS CPU ids for stage II workers.
    pub fn stage2_os(&self, topo: &Topology) -> Vec<usize> {
        self.stage2.iter().map(|&c| topo.os_cpu[c]).collect()
    }
}

/// Assigns `workers` stage I and `workers` stage II workers to logical CPUs.
///
/// Thread 0 of every core is used before any thread 1. Inside each node's
/// range, CPUs are taken in pairs: the first of a pair goes to stage I
/// worker `t`, the second to its sibling stage II worker `t`, so siblings
/// share a node. A CPU left unpaired in a node (odd cores per node) is
/// paired with the next such leftover after the pass.
pub fn compute_binding(topo: &Topology, workers: usize) -> Result<BindingPlan> {
    if workers == 0 {
        return Err(HdError::config("binding needs at least one worker per stage"));
    }
    if 2 * workers > topo.logical_cpu_count() {
        return Err(HdError::config(format!(
            "{} workers need {} logical CPUs, topology has {}",
            2 * workers,
            2 * workers,
            topo.logical_cpu_count()
        )));
    }
    let pairs = if topo.is_uniform() {
        node_pairs(topo)
    } else {
        log::warn!(
            "non-uniform topology ({:?} cores per node); spreading workers round-robin",
            topo.node_cores
        );
        round_robin_pairs(topo)
    };
    let (stage1, stage2) = pairs.into_iter().take(workers).unzip();
    Ok(BindingPlan {
        stage1,
        stage2,
        fallback: !topo.is_uniform(),
    })
}

fn node_ranges(topo: &Topology) -> Vec<std::ops::Range<usize>> {
    let mut start = 0;
    topo.node_cores
        .iter()
        .map(|&c| {
            let r = start..start + c;
            start += c;
            r
        })
        .collect()
}

fn node_pairs(topo: &Topology) -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(topo.logical_cpu_count() / 2);
    let mut carry: Option<usize> = None;
    for pass in 0..topo.smt {
        let base = pass * topo.gamma;
        let mut leftovers = Vec::new();
        for (node, range) in node_ranges(topo).into_iter().enumerate() {
            let mut ids: Vec<usize> = range.map(|c| base + c).collect();
            if node == 0 {
                if let Some(c) = carry.take() {
                    ids.insert(0, c);
                }
            }
            let mut chunks = ids.chunks_exact(2);
            pairs.extend(chunks.by_ref().map(|p| (p[0], p[1])));
            leftovers.extend_from_slice(chunks.remainder());
        }
        let mut chunks = leftovers.chunks_exact(2);
        pairs.extend(chunks.by_ref().map(|p| (p[0], p[1])));
        carry = chunks.remainder().first().copied();
    }
    pairs
}

fn round_robin_pairs(topo: &Topology) -> Vec<(usize, usize)> {
    let ranges = node_ranges(topo);
    let mut order = Vec::with_capacity(topo.logical_cpu_count());
    for pass in 0..topo.smt {
        let longest = topo.node_cores.iter().copied().max().unwrap_or(0);
        for i in 0..longest {
            for r in &ranges {
                if r.start + i < r.end {
                    order.push(pass * topo.gamma + r.start + i);
                }
            }
        }
    }
    order.chunks_exact(2).map(|p| (p[0], p[1])).collect()
}

#[derive(Debug, thiserror::Error)]
pub enum AffinityError {
    #[error("CPU {0} outside the supported affinity mask range")]
    OutOfRange(usize),
    #[error("sched_setaffinity failed for CPU {cpu}: {source}")]
    Os {
        cpu: usize,
        #[source]
        source: std::io::Error,
    },
    #[error("thread affinity is not supported on this platform")]
    Unsupported,
}

/// Pins the calling thread to one OS CPU.
#[cfg(target_os = "linux")]
pub fn apply_binding(os_cpu: usize) -> std::result::Result<(), AffinityError> {
    if os_cpu >= libc::CPU_SETSIZE as usize {
        return Err(AffinityError::OutOfRange(os_cpu));
    }
    // SAFETY: cpu_set_t is plain data; the set is sized by the type itself.
    unsafe {
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        libc::CPU_ZERO(&mut set);
        libc::CPU_SET(os_cpu, &mut set);
        if libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set) != 0 {
            return Err(AffinityError::Os {
                cpu: os_cpu,
                source: std::io::Error::last_os_error(),
            });
        }
    }
    Ok(())
}

#[cfg(not(target_os = "linux"))]
pub fn apply_binding(_os_cpu: usize) -> std::result::Result<(), AffinityError> {
    Err(AffinityError::Unsupported)
}

/// Pins the calling thread, logging instead of failing.
pub fn apply_binding_or_warn(os_cpu: usize, role: &str) -> bool {
    match apply_binding(os_cpu) {
        Ok(()) => true,
        Err(e) => {
            log::warn!("{role}: running unpinned ({e})");
            false
        }
    }
}

/// CPUs the calling thread may run on.
#[cfg(target_os = "linux")]
pub fn current_affinity() -> Option<Vec<usize>> {
    // SAFETY: see apply_binding.
    unsafe {
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        if libc::sched_getaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &mut set) != 0 {
            return None;
        }
        Some(
            (0..libc::CPU_SETSIZE as usize)
                .filter(|&c| libc::CPU_ISSET(c, &set))
                .collect(),
        )
    }
}

#[cfg(not(target_os = "linux"))]
pub fn current_affinity() -> Option<Vec<usize>> {
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binding_of_eight_cores_four_nodes() {
        let topo = Topology::synthetic(8, 4, 2).unwrap();
        let plan = compute_binding(&topo, 4).unwrap();
        assert_eq!(plan.stage1, vec![0, 2, 4, 6]);
        assert_eq!(plan.stage2, vec![1, 3, 5, 7]);
        let plan = compute_binding(&topo, 8).unwrap();
        assert_eq!(plan.stage1, vec![0, 2, 4, 6, 8, 10, 12, 14]);
        assert_eq!(plan.stage2, vec![1, 3, 5, 7, 9, 11, 13, 15]);
        assert!(!plan.fallback);
    }

    #[test]
    fn single_worker_pair() {
        let topo = Topology::synthetic(4, 1, 2).unwrap();
        let plan = compute_binding(&topo, 1).unwrap();
        assert_eq!((plan.stage1, plan.stage2), (vec![0], vec![1]));
    }

    #[test]
    fn too_many_workers_is_config_error() {
        let topo = Topology::synthetic(8, 4, 2).unwrap();
        assert!(matches!(
            compute_binding(&topo, 9),
            Err(HdError::InvalidConfig(_))
        ));
        assert!(compute_binding(&topo, 0).is_err());
    }

    #[test]
    fn odd_cores_per_node_pairs_leftovers_after_the_pass() {
        let topo = Topology::synthetic(6, 2, 2).unwrap();
        let plan = compute_binding(&topo, 6).unwrap();
        assert_eq!(plan.stage1, vec![0, 3, 2, 6, 9, 8]);
        assert_eq!(plan.stage2, vec![1, 4, 5, 7, 10, 11]);
    }

    #[test]
    fn odd_core_count_carries_into_thread_one() {
        let topo = Topology::synthetic(3, 1, 2).unwrap();
        let plan = compute_binding(&topo, 3).unwrap();
        assert_eq!(plan.stage1, vec![0, 2, 4]);
        assert_eq!(plan.stage2, vec![1, 3, 5]);
    }

    #[test]
    fn non_uniform_topology_falls_back() {
        let topo = Topology::synthetic(5, 2, 2).unwrap();
        assert_eq!(topo.node_cores, vec![2, 3]);
        let plan = compute_binding(&topo, 5).unwrap();
        assert!(plan.fallback);
        let mut all: Vec<_> = plan.stage1.iter().chain(&plan.stage2).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        // Round-robin: node 0, node 1, node 0, node 1, node 1.
        assert_eq!((plan.stage1[0], plan.stage2[0]), (0, 2));
    }

    #[test]
    fn large_platform_shapes() {
        let amd = Topology::synthetic(32, 2, 2).unwrap();
        assert_eq!(amd.logical_cpu_count(), 64);
        assert!(amd.is_uniform());
        let intel = Topology::parse_override("gamma=64,eta=4,smt=2").unwrap();
        assert_eq!((intel.gamma, intel.eta), (64, 4));
        assert_eq!(compute_binding(&intel, 64).unwrap().stage2.len(), 64);
    }

    #[test]
    fn override_parsing() {
        let t = Topology::parse_override("8x4").unwrap();
        assert_eq!((t.gamma, t.eta, t.smt), (8, 4, 2));
        let t = Topology::parse_override("16x2x1").unwrap();
        assert_eq!((t.gamma, t.eta, t.smt), (16, 2, 1));
        assert!(Topology::parse_override("8x").is_err());
        assert!(Topology::parse_override("gamma=8").is_err());
        assert!(Topology::parse_override("2x4").is_err());
    }

    #[test]
    fn cpu_list_parsing() {
        assert_eq!(parse_cpu_list("0-3,8,10-11").unwrap(), vec![0, 1, 2, 3, 8, 10, 11]);
        assert_eq!(parse_cpu_list("0").unwrap(), vec![0]);
        assert!(parse_cpu_list("a-b").is_none());
    }

    #[test]
    fn sysfs_tree_with_interleaved_smt_numbering() {
        // 2 nodes x 2 cores x 2 threads, siblings numbered (0,1), (2,3), ...
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        fs::create_dir_all(root.join("cpu")).unwrap();
        fs::write(root.join("cpu/online"), "0-7\n").unwrap();
        for cpu in 0..8 {
            let t = root.join(format!("cpu/cpu{cpu}/topology"));
            fs::create_dir_all(&t).unwrap();
            fs::write(t.join("core_id"), format!("{}\n", cpu / 2)).unwrap();
            fs::write(t.join("physical_package_id"), format!("{}\n", cpu / 4)).unwrap();
        }
        for node in 0..2 {
            let n = root.join(format!("node/node{node}"));
            fs::create_dir_all(&n).unwrap();
            fs::write(n.join("cpulist"), format!("{}-{}\n", node * 4, node * 4 + 3)).unwrap();
        }
        let topo = read_sysfs(root, None).unwrap();
        assert_eq!((topo.gamma, topo.eta, topo.smt), (4, 2, 2));
        // Canonical thread-0 ids map to the first sibling of each core.
        assert_eq!(topo.os_cpu, vec![0, 2, 4, 6, 1, 3, 5, 7]);
        assert_eq!(topo.node_of(1), 0);
        assert_eq!(topo.node_of(6), 1);

        let restricted = read_sysfs(root, Some(&[0, 1, 4])).unwrap();
        assert_eq!((restricted.gamma, restricted.eta, restricted.smt), (2, 2, 1));
        assert_eq!(restricted.os_cpu, vec![0, 4]);
    }

    #[test]
    fn discovery_never_fails() {
        let t = discover_topology();
        assert!(t.gamma >= 1 && t.eta >= 1 && t.smt >= 1);
        assert_eq!(t.os_cpu.len(), t.logical_cpu_count());
    }

    #[cfg(target_os = "linux")]
    #[test]
    fn binding_pins_the_calling_thread() {
        let allowed = current_affinity().unwrap();
        let target = *allowed.last().unwrap();
        std::thread::spawn(move || {
            apply_binding(target).unwrap();
            assert_eq!(current_affinity().unwrap(), vec![target]);
        })
        .join()
        .unwrap();
        std::thread::spawn(|| {
            assert!(!apply_binding_or_warn(libc::CPU_SETSIZE as usize + 1, "test"));
        })
        .join()
        .unwrap();
    }
}
