//! Independent reference models used by the integration tests.

#![allow(dead_code)]

use dsn_sim::segment::{AllocationPolicy, PAGE_SIZE};

/// Page-granular occupancy map: `true` means allocated or reserved.
#[derive(Debug, Clone)]
pub struct PageBitmap {
    used: Vec<bool>,
}

impl PageBitmap {
    pub fn new(total_bytes: u64, reserved_bytes: u64) -> Self {
        let pages = (total_bytes / PAGE_SIZE) as usize;
        let reserved = (reserved_bytes / PAGE_SIZE) as usize;
        let mut used = vec![false; pages];
        used[..reserved].iter_mut().for_each(|p| *p = true);
        Self { used }
    }

    fn pages(base: u64, limit: u64) -> std::ops::Range<usize> {
        assert_eq!(base % PAGE_SIZE, 0);
        assert_eq!(limit % PAGE_SIZE, 0);
        (base / PAGE_SIZE) as usize..(limit / PAGE_SIZE) as usize
    }

    /// Marks `[base, limit)` used; panics if any page already is.
    pub fn mark(&mut self, base: u64, limit: u64) {
        for p in Self::pages(base, limit) {
            assert!(!self.used[p], "page {p} granted twice");
            self.used[p] = true;
        }
    }

    /// Marks `[base, limit)` free; panics if any page already is.
    pub fn clear(&mut self, base: u64, limit: u64) {
        for p in Self::pages(base, limit) {
            assert!(self.used[p], "page {p} freed twice");
            self.used[p] = false;
        }
    }

    /// Maximal free runs as `(base, limit)` byte ranges, ascending.
    pub fn free_runs(&self) -> Vec<(u64, u64)> {
        let mut runs = Vec::new();
        let mut start = None;
        for (i, &used) in self.used.iter().chain(std::iter::once(&true)).enumerate() {
            match (used, start) {
                (false, None) => start = Some(i),
                (true, Some(s)) => {
                    runs.push((s as u64 * PAGE_SIZE, i as u64 * PAGE_SIZE));
                    start = None;
                }
                _ => {}
            }
        }
        runs
    }

    pub fn free_bytes(&self) -> u64 {
        self.used.iter().filter(|u| !**u).count() as u64 * PAGE_SIZE
    }
}

/// What the allocator should grant for `demand` over the free `runs`
/// (ascending, disjoint), written from the allocation rules:
/// exact fit with the lowest base; else the low end of the largest run bigger
/// than the demand (lowest base on ties); else combine runs, either
/// smallest-first while they fit (`Opt1`) or largest-first (`Opt2`), and
/// retry with what is left.
pub fn reference_plan(runs: &[(u64, u64)], demand: u64, policy: AllocationPolicy) -> Option<Vec<(u64, u64)>> {
    let free: u64 = runs.iter().map(|(b, l)| l - b).sum();
    if demand == 0 || demand > free {
        return None;
    }
    let mut pool: Vec<(u64, u64)> = runs.to_vec();
    let mut out = Vec::new();
    let mut need = demand;
    loop {
        let len = |r: &(u64, u64)| r.1 - r.0;
        let exact = pool.iter().filter(|r| len(r) == need).min_by_key(|r| r.0).copied();
        if let Some(r) = exact {
            out.push(r);
            return Some(out);
        }
        let bigger =
            pool.iter().filter(|r| len(r) > need).max_by(|a, b| len(a).cmp(&len(b)).then(b.0.cmp(&a.0))).copied();
        if let Some(r) = bigger {
            out.push((r.0, r.0 + need));
            return Some(out);
        }
        match policy {
            AllocationPolicy::Opt1 => {
                let mut by_size = pool.clone();
                by_size.sort_by_key(|r| (len(r), r.0));
                for r in by_size {
                    if len(&r) > need {
                        break;
                    }
                    need -= len(&r);
                    out.push(r);
                    pool.retain(|x| *x != r);
                    if need == 0 {
                        return Some(out);
                    }
                }
            }
            AllocationPolicy::Opt2 => {
                let r = *pool
                    .iter()
                    .max_by(|a, b| len(a).cmp(&len(b)).then(b.0.cmp(&a.0)))
                    .expect("free bytes cover the demand");
                need -= len(&r);
                out.push(r);
                pool.retain(|x| *x != r);
            }
        }
    }
}
