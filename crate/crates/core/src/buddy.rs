//! Binary buddy allocator over 4 KiB pages, used as the paging-style baseline.
//!
//! A VM demand is served as a sequence of fixed-order chunks (2 MiB by
//! default), each taken from the lowest-addressed free block of the smallest
//! sufficient order. When a chunk order is exhausted the request falls back
//! to smaller blocks. The granted pages are then grouped into maximal
//! contiguous runs, so a fragmented heap yields a VM with many segments.

use std::collections::BTreeSet;
use std::time::Instant;

use crate::segment::{AllocError, FreeSegmentList, SegmentDescriptor, VmAllocation, PAGE_SIZE};

/// 1 GiB blocks.
pub const DEFAULT_MAX_ORDER: u32 = 18;
/// 2 MiB chunks.
pub const DEFAULT_CHUNK_ORDER: u32 = 9;

#[derive(Debug, Clone)]
pub struct BuddyAllocator {
    total_pages: u64,
    reserved_pages: u64,
    max_order: u32,
    chunk_order: u32,
    free: Vec<BTreeSet<u64>>,
    free_pages: u64,
}

impl BuddyAllocator {
    pub fn new(total_bytes: u64, reserved_bytes: u64, max_order: u32) -> Result<Self, AllocError> {
        if !total_bytes.is_multiple_of(PAGE_SIZE) || !reserved_bytes.is_multiple_of(PAGE_SIZE) {
            return Err(AllocError::InvalidSize("memory sizes must be page multiples".into()));
        }
        if total_bytes == 0 || reserved_bytes >= total_bytes {
            return Err(AllocError::InvalidSize(format!(
                "reserved region ({reserved_bytes} bytes) must be smaller than total memory ({total_bytes} bytes)"
            )));
        }
        if max_order > 40 {
            return Err(AllocError::InvalidSize(format!("max order {max_order} is too large")));
        }
        let mut buddy = Self {
            total_pages: total_bytes / PAGE_SIZE,
            reserved_pages: reserved_bytes / PAGE_SIZE,
            max_order,
            chunk_order: DEFAULT_CHUNK_ORDER.min(max_order),
            free: vec![BTreeSet::new(); max_order as usize + 1],
            free_pages: 0,
        };
        let (start, end) = (buddy.reserved_pages, buddy.total_pages);
        for (pfn, order) in aligned_blocks(start, end, max_order) {
            buddy.free[order as usize].insert(pfn);
            buddy.free_pages += 1 << order;
        }
        Ok(buddy)
    }

    pub fn with_chunk_order(mut self, chunk_order: u32) -> Self {
        self.chunk_order = chunk_order.min(self.max_order);
        self
    }

    pub fn max_order(&self) -> u32 {
        self.max_order
    }

    pub fn chunk_order(&self) -> u32 {
        self.chunk_order
    }

    pub fn free_bytes(&self) -> u64 {
        self.free_pages * PAGE_SIZE
    }

    pub fn total_bytes(&self) -> u64 {
        self.total_pages * PAGE_SIZE
    }

    pub fn reserved_bytes(&self) -> u64 {
        self.reserved_pages * PAGE_SIZE
    }

    /// Number of free blocks at each order.
    pub fn free_block_counts(&self) -> Vec<usize> {
        self.free.iter().map(BTreeSet::len).collect()
    }

    /// Allocates `demand` bytes (a page multiple) and reports the pages as
    /// contiguous runs.
    pub fn allocate(&mut self, vm_id: &str, demand: u64, now: u64) -> Result<VmAllocation, AllocError> {
        let started = Instant::now();
        if demand == 0 || !demand.is_multiple_of(PAGE_SIZE) {
            return Err(AllocError::InvalidSize(format!(
                "baseline demand must be a positive multiple of {PAGE_SIZE} bytes, got {demand}"
            )));
        }
        let pages = demand / PAGE_SIZE;
        if pages > self.free_pages {
            return Err(AllocError::InsufficientMemory { requested: demand, free: self.free_bytes() });
        }

        let mut pending: Vec<u32> = Vec::new();
        let chunk = 1u64 << self.chunk_order;
        let rest = pages % chunk;
        for order in (0..self.chunk_order).filter(|o| rest & (1 << o) != 0) {
            pending.push(order);
        }
        pending.extend(std::iter::repeat_n(self.chunk_order, (pages / chunk) as usize));

        let mut blocks: Vec<(u64, u32)> = Vec::new();
        while let Some(order) = pending.pop() {
            match self.alloc_block(order) {
                Some(pfn) => blocks.push((pfn, order)),
                None => {
                    // enough pages are free, just not at this order
                    debug_assert!(order > 0);
                    pending.push(order - 1);
                    pending.push(order - 1);
                }
            }
        }

        blocks.sort_unstable();
        let mut segments: Vec<SegmentDescriptor> = Vec::new();
        for (pfn, order) in blocks {
            let base = pfn * PAGE_SIZE;
            let limit = (pfn + (1 << order)) * PAGE_SIZE;
            match segments.last_mut() {
                Some(last) if last.limit == base => last.limit = limit,
                _ => segments.push(SegmentDescriptor { base, limit, date: now }),
            }
        }
        Ok(VmAllocation { vm_id: vm_id.to_owned(), segments, alloc_latency: started.elapsed() })
    }

    pub fn release(&mut self, allocation: &VmAllocation) -> Result<(), AllocError> {
        for s in &allocation.segments {
            let bad = s.base >= s.limit
                || s.base % PAGE_SIZE != 0
                || s.limit % PAGE_SIZE != 0
                || s.base / PAGE_SIZE < self.reserved_pages
                || s.limit / PAGE_SIZE > self.total_pages
                || self.intersects_free(s.base / PAGE_SIZE, s.limit / PAGE_SIZE);
            if bad {
                return Err(AllocError::Overlap { base: s.base, limit: s.limit });
            }
        }
        for s in &allocation.segments {
            for (pfn, order) in aligned_blocks(s.base / PAGE_SIZE, s.limit / PAGE_SIZE, self.max_order) {
                self.free_block(pfn, order);
            }
        }
        Ok(())
    }

    /// Free memory as a coalesced segment list, for schedulers and reports.
    pub fn free_view(&self, machine_id: u32) -> FreeSegmentList {
        let mut blocks: Vec<(u64, u32)> = self
            .free
            .iter()
            .enumerate()
            .flat_map(|(order, set)| set.iter().map(move |&pfn| (pfn, order as u32)))
            .collect();
        blocks.sort_unstable();
        let mut segments: Vec<SegmentDescriptor> = Vec::new();
        for (pfn, order) in blocks {
            let base = pfn * PAGE_SIZE;
            let limit = (pfn + (1 << order)) * PAGE_SIZE;
            match segments.last_mut() {
                Some(last) if last.limit == base => last.limit = limit,
                _ => segments.push(SegmentDescriptor { base, limit, date: 0 }),
            }
        }
        FreeSegmentList::from_parts(machine_id, self.total_bytes(), self.reserved_bytes(), segments)
    }

    fn alloc_block(&mut self, order: u32) -> Option<u64> {
        let found = (order..=self.max_order).find(|&o| !self.free[o as usize].is_empty())?;
        let pfn = self.free[found as usize].pop_first()?;
        for o in (order..found).rev() {
            self.free[o as usize].insert(pfn + (1 << o));
        }
        self.free_pages -= 1 << order;
        Some(pfn)
    }

    fn free_block(&mut self, mut pfn: u64, mut order: u32) {
        self.free_pages += 1 << order;
        while order < self.max_order {
            let buddy = pfn ^ (1 << order);
            if !self.free[order as usize].remove(&buddy) {
                break;
            }
            pfn = pfn.min(buddy);
            order += 1;
        }
        self.free[order as usize].insert(pfn);
    }

    fn intersects_free(&self, start: u64, end: u64) -> bool {
        self.free.iter().enumerate().any(|(order, set)| {
            let lo = start.saturating_sub((1 << order) - 1);
            set.range(lo..end).next().is_some()
        })
    }
}

/// Splits `[start, end)` into maximal naturally aligned power-of-two blocks.
fn aligned_blocks(mut start: u64, end: u64, max_order: u32) -> Vec<(u64, u32)> {
    let mut out = Vec::new();
    while start < end {
        let align = if start == 0 { max_order } else { start.trailing_zeros().min(max_order) };
        let fit = 63 - (end - start).leading_zeros();
        let order = align.min(fit);
        out.push((start, order));
        start += 1 << order;
    }
    out
}
