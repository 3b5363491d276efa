//! Sanitizing host runtime: a simulated flat address space with paged data
//! and shadow memory, emulated allocators, and the redzone and exact
//! bounds detectors.

mod memory;
mod report;

use std::collections::{BTreeMap, VecDeque};

use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::kir::{HeapApi, MemorySpace, ScalarType};

pub use memory::{PagedMemory, ShadowMemory, ShadowState};
pub use report::{AccessKind, AccessRecord, AllocContext, BugClass, BugReport, ThreadId};

pub const HOST_HEAP_BASE: u64 = 0x1000_0000;
pub const DEVICE_HEAP_BASE: u64 = 0x0100_0000_0000;
pub const DEVICE_HEAP_SPAN: u64 = 1 << 24;
pub const STACK_BASE: u64 = 0x2000_0000_0000;
pub const STACK_SPAN: u64 = 1 << 20;
pub const SHARED_BASE: u64 = 0x3000_0000_0000;
pub const SHARED_SPAN: u64 = 1 << 32;
pub const COMPILER_BASE: u64 = 0x4000_0000_0000;
pub const COMPILER_SPAN: u64 = 1 << 32;

/// Sanitizer knobs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SanConfig {
    /// Shadow granule in bytes.
    pub granule: u64,
    /// Redzone on each side of every allocation.
    pub redzone: u64,
    /// Quarantine capacity in bytes of freed payload.
    pub quarantine: u64,
    /// Size of the host heap.
    pub host_arena: u64,
}

impl Default for SanConfig {
    fn default() -> Self {
        SanConfig {
            granule: 8,
            redzone: 16,
            quarantine: 256 * 1024,
            host_arena: 64 << 20,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorMode {
    /// Shadow-only tripwire checks.
    Redzone,
    /// Provenance-based base-and-bounds and lifetime checks.
    Exact,
    /// Exact checks that also see dynamic shared carve-outs; used by the
    /// reference interpreter as ground truth.
    Reference,
}

impl DetectorMode {
    pub fn name(self) -> &'static str {
        match self {
            DetectorMode::Redzone => "redzone",
            DetectorMode::Exact => "exact",
            DetectorMode::Reference => "reference",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "redzone" => Some(DetectorMode::Redzone),
            "exact" => Some(DetectorMode::Exact),
            "reference" => Some(DetectorMode::Reference),
            _ => None,
        }
    }
}

/// What happens after a report: keep going, or stop the execution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    Audit,
    Abort,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AllocId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Allocator {
    HostApi,
    DeviceMalloc,
    Stack,
    Shared,
    Compiler,
}

impl Allocator {
    pub fn from_api(api: HeapApi) -> Self {
        match api {
            HeapApi::Host => Allocator::HostApi,
            HeapApi::Device => Allocator::DeviceMalloc,
        }
    }

    pub fn is_heap(self) -> bool {
        matches!(self, Allocator::HostApi | Allocator::DeviceMalloc)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllocState {
    Live,
    Freed(u64),
    OutOfScope,
}

/// Where a chunk's memory comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SegKey {
    Host,
    Device(u64),
    Stack(u32),
    Shared,
    Compiler,
}

impl SegKey {
    fn range(self, cfg: &SanConfig) -> (u64, u64) {
        match self {
            SegKey::Host => (HOST_HEAP_BASE, cfg.host_arena),
            SegKey::Device(g) => (DEVICE_HEAP_BASE + g * DEVICE_HEAP_SPAN, DEVICE_HEAP_SPAN),
            SegKey::Stack(t) => (STACK_BASE + t as u64 * STACK_SPAN, STACK_SPAN),
            SegKey::Shared => (SHARED_BASE, SHARED_SPAN),
            SegKey::Compiler => (COMPILER_BASE, COMPILER_SPAN),
        }
    }
}

#[derive(Clone, Debug)]
struct Segment {
    base: u64,
    limit: u64,
    bump: u64,
    /// First-fit list of reusable (offset, len) holes.
    free: Vec<(u64, u64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub id: AllocId,
    pub base: u64,
    pub size: u64,
    pub space: MemorySpace,
    pub allocator: Allocator,
    pub state: AllocState,
    pub elem: ScalarType,
    /// Declared sub-objects as (byte offset, byte length).
    pub fields: Vec<(u64, u64)>,
    chunk_lo: u64,
    chunk_hi: u64,
    #[serde(skip)]
    seg: Option<SegKeyRepr>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct SegKeyRepr(SegKey);

/// Bounds a pointer is allowed to touch, carried through arithmetic.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Prov {
    pub alloc: AllocId,
    /// Bounds the exact detector enforces.
    pub lo: u64,
    pub hi: u64,
    /// Bounds the reference detector enforces (never wider than lo..hi).
    pub tight_lo: u64,
    pub tight_hi: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ptr {
    pub addr: u64,
    pub elem: ScalarType,
    pub prov: Option<Prov>,
}

impl Ptr {
    pub fn offset_elems(self, k: i64) -> Ptr {
        Ptr {
            addr: self.addr.wrapping_add((k as u64).wrapping_mul(self.elem.size())),
            ..self
        }
    }
}

/// Runtime values of the interpreter.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub enum Value {
    #[default]
    Undef,
    Int(i64),
    Float(f64),
    Ptr(Ptr),
}

impl Value {
    pub fn as_int(self) -> i64 {
        match self {
            Value::Int(v) => v,
            Value::Float(f) => {
                if f.is_nan() {
                    0
                } else {
                    f as i64
                }
            }
            Value::Ptr(p) => p.addr as i64,
            Value::Undef => 0,
        }
    }

    pub fn as_float(self) -> f64 {
        match self {
            Value::Int(v) => v as f64,
            Value::Float(f) => f,
            Value::Ptr(p) => p.addr as f64,
            Value::Undef => 0.0,
        }
    }

    pub fn truthy(self) -> bool {
        match self {
            Value::Int(v) => v != 0,
            Value::Float(f) => f != 0.0,
            Value::Ptr(p) => p.addr != 0,
            Value::Undef => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SanError {
    #[error("out of memory: {requested} bytes requested from the {segment} arena")]
    OutOfMemory { requested: u64, segment: &'static str },
}

#[derive(Clone, Debug, Default)]
struct Frame {
    start: u64,
    allocs: Vec<AllocId>,
}

/// One execution's memory: data, shadow, allocation table and quarantine.
#[derive(Clone, Debug)]
pub struct Runtime {
    pub cfg: SanConfig,
    pub mode: DetectorMode,
    pub data: PagedMemory,
    pub shadow: ShadowMemory,
    allocs: Vec<Allocation>,
    chunks: BTreeMap<u64, AllocId>,
    bases: FxHashMap<u64, AllocId>,
    quarantine: VecDeque<AllocId>,
    quarantine_bytes: u64,
    free_seq: u64,
    segments: FxHashMap<SegKey, Segment>,
    stacks: FxHashMap<u32, Vec<Frame>>,
    shared_allocs: Vec<AllocId>,
    compiler_allocs: Vec<AllocId>,
}

/// Outcome of a free request.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FreeOutcome {
    Freed(AllocId),
    /// free(NULL)
    Ignored,
    Bug(BugClass, Option<AllocId>),
}

impl Runtime {
    pub fn new(cfg: SanConfig, mode: DetectorMode) -> Self {
        Runtime {
            cfg,
            mode,
            data: PagedMemory::default(),
            shadow: ShadowMemory::new(cfg.granule),
            allocs: Vec::new(),
            chunks: BTreeMap::new(),
            bases: FxHashMap::default(),
            quarantine: VecDeque::new(),
            quarantine_bytes: 0,
            free_seq: 0,
            segments: FxHashMap::default(),
            stacks: FxHashMap::default(),
            shared_allocs: Vec::new(),
            compiler_allocs: Vec::new(),
        }
    }

    pub fn allocation(&self, id: AllocId) -> &Allocation {
        &self.allocs[id.0 as usize]
    }

    pub fn allocations(&self) -> &[Allocation] {
        &self.allocs
    }

    pub fn quarantine_bytes(&self) -> u64 {
        self.quarantine_bytes
    }

    fn round(&self, n: u64) -> u64 {
        n.div_ceil(self.cfg.granule) * self.cfg.granule
    }

    fn segment(&mut self, key: SegKey) -> &mut Segment {
        let cfg = self.cfg;
        self.segments.entry(key).or_insert_with(|| {
            let (base, limit) = key.range(&cfg);
            Segment {
                base,
                limit,
                bump: 0,
                free: Vec::new(),
            }
        })
    }

    fn carve(&mut self, key: SegKey, chunk: u64) -> Option<u64> {
        let seg = self.segment(key);
        if let Some(pos) = seg.free.iter().position(|&(_, len)| len >= chunk) {
            let (off, len) = seg.free[pos];
            if len == chunk {
                seg.free.remove(pos);
            } else {
                seg.free[pos] = (off + chunk, len - chunk);
            }
            return Some(seg.base + off);
        }
        if seg.bump.checked_add(chunk)? > seg.limit {
            return None;
        }
        let at = seg.base + seg.bump;
        seg.bump += chunk;
        Some(at)
    }

    /// Allocates `size` bytes with redzones on both flanks.
    #[allow(clippy::too_many_arguments)]
    pub fn alloc(
        &mut self,
        size: u64,
        space: MemorySpace,
        allocator: Allocator,
        key: SegKey,
        elem: ScalarType,
        field_elems: &[u32],
    ) -> Result<Ptr, SanError> {
        let r = self.cfg.redzone;
        let payload = self.round(size);
        let chunk = payload
            .checked_add(2 * r)
            .ok_or(SanError::OutOfMemory {
                requested: size,
                segment: seg_name(key),
            })?;
        let lo = self.carve(key, chunk).ok_or(SanError::OutOfMemory {
            requested: size,
            segment: seg_name(key),
        })?;
        let base = lo + r;
        let id = AllocId(self.allocs.len() as u32);
        let mut fields = Vec::new();
        let mut off = 0u64;
        for &n in field_elems {
            let len = n as u64 * elem.size();
            fields.push((off, len));
            off += len;
        }
        self.shadow.fill(lo, base, ShadowState::Redzone);
        self.shadow.fill(base, base + payload, ShadowState::Addressable);
        self.shadow.fill(base + payload, lo + chunk, ShadowState::Redzone);
        self.data.zero(base, payload);
        self.allocs.push(Allocation {
            id,
            base,
            size,
            space,
            allocator,
            state: AllocState::Live,
            elem,
            fields,
            chunk_lo: lo,
            chunk_hi: lo + chunk,
            seg: Some(SegKeyRepr(key)),
        });
        self.chunks.insert(lo, id);
        if allocator.is_heap() {
            self.bases.insert(base, id);
        }
        match key {
            SegKey::Stack(t) => {
                let frames = self.stacks.entry(t).or_default();
                if frames.is_empty() {
                    frames.push(Frame::default());
                }
                frames.last_mut().unwrap().allocs.push(id);
            }
            SegKey::Shared => self.shared_allocs.push(id),
            SegKey::Compiler => self.compiler_allocs.push(id),
            _ => {}
        }
        let prov = Prov {
            alloc: id,
            lo: base,
            hi: base + size,
            tight_lo: base,
            tight_hi: base + size,
        };
        Ok(Ptr {
            addr: base,
            elem,
            prov: Some(prov),
        })
    }

    /// Pointer to declared sub-object `k` of the allocation `p` derives from.
    pub fn field(&self, p: Ptr, k: u32) -> Ptr {
        let Some(prov) = p.prov else { return p };
        let a = self.allocation(prov.alloc);
        let Some(&(off, len)) = a.fields.get(k as usize) else {
            return p;
        };
        let lo = a.base + off;
        let hi = lo + len;
        Ptr {
            addr: lo,
            elem: p.elem,
            prov: Some(Prov {
                alloc: prov.alloc,
                lo,
                hi,
                tight_lo: lo,
                tight_hi: hi,
            }),
        }
    }

    /// Narrows only the reference bounds; used for dynamic shared carve-outs.
    pub fn carve_out(&self, p: Ptr, off: u64, len: u64) -> Ptr {
        let Some(prov) = p.prov else { return p };
        let lo = p.addr + off;
        Ptr {
            addr: lo,
            elem: p.elem,
            prov: Some(Prov {
                tight_lo: lo,
                tight_hi: lo + len,
                ..prov
            }),
        }
    }

    /// Checks an access and returns the bug class with its allocation
    /// context, or `None` if the detector sees nothing wrong.
    pub fn check_access(&self, p: &Ptr, size: u64) -> Option<(BugClass, AllocContext)> {
        let addr = p.addr;
        match (self.mode, p.prov) {
            (DetectorMode::Redzone, _) | (_, None) => self.check_shadow(addr, size),
            (mode, Some(prov)) => {
                let a = self.allocation(prov.alloc);
                let ctx = |d: i64| AllocContext {
                    alloc: Some(prov.alloc),
                    distance: d,
                };
                match a.state {
                    AllocState::Freed(_) => return Some((BugClass::UAF, ctx(addr as i64 - a.base as i64))),
                    AllocState::OutOfScope => {
                        return Some((BugClass::UAS, ctx(addr as i64 - a.base as i64)))
                    }
                    AllocState::Live => {}
                }
                let (lo, hi) = if mode == DetectorMode::Reference {
                    (prov.tight_lo, prov.tight_hi)
                } else {
                    (prov.lo, prov.hi)
                };
                let end = addr.wrapping_add(size);
                if addr >= lo && end <= hi && end >= addr {
                    return None;
                }
                let d = spatial_distance(addr, size, lo, hi);
                Some((self.spatial_class(d), ctx(d)))
            }
        }
    }

    fn spatial_class(&self, distance: i64) -> BugClass {
        if distance.unsigned_abs() < self.cfg.redzone {
            BugClass::BO
        } else {
            BugClass::OOB_RW
        }
    }

    fn check_shadow(&self, addr: u64, size: u64) -> Option<(BugClass, AllocContext)> {
        let g = self.cfg.granule;
        let first = addr / g;
        let last = addr.saturating_add(size.max(1) - 1) / g;
        for gi in first..=last {
            let st = self.shadow.get_granule(gi);
            let class = match st {
                ShadowState::Addressable => continue,
                ShadowState::Redzone => BugClass::BO,
                ShadowState::Freed => BugClass::UAF,
                ShadowState::OutOfScope => BugClass::UAS,
                ShadowState::Unmapped => BugClass::OOB_RW,
            };
            return Some((class, self.nearest(addr, size)));
        }
        None
    }

    /// Nearest allocation to an address, for report context.
    pub fn nearest(&self, addr: u64, size: u64) -> AllocContext {
        let below = self.chunks.range(..=addr).next_back().map(|(_, id)| *id);
        let above = self
            .chunks
            .range(addr.saturating_add(1)..)
            .next()
            .map(|(_, id)| *id);
        let mut best: Option<(AllocId, i64)> = None;
        for id in [below, above].into_iter().flatten() {
            let a = self.allocation(id);
            let d = spatial_distance(addr, size, a.base, a.base + a.size);
            if best.is_none_or(|(_, bd)| d.unsigned_abs() < bd.unsigned_abs()) {
                best = Some((id, d));
            }
        }
        AllocContext {
            alloc: best.map(|b| b.0),
            distance: best.map(|b| b.1).unwrap_or(i64::MAX),
        }
    }

    /// Releases a heap allocation through `api`.
    pub fn free(&mut self, p: Ptr, api: HeapApi) -> FreeOutcome {
        if p.addr == 0 {
            return FreeOutcome::Ignored;
        }
        let target = match (self.mode, p.prov) {
            (DetectorMode::Redzone, _) | (_, None) => match self.bases.get(&p.addr).copied() {
                Some(id) => match self.allocation(id).state {
                    AllocState::Live => id,
                    AllocState::Freed(_) if self.quarantine.contains(&id) => {
                        return FreeOutcome::Bug(BugClass::DF, Some(id))
                    }
                    _ => return FreeOutcome::Bug(BugClass::IF, Some(id)),
                },
                None => return FreeOutcome::Bug(BugClass::IF, self.nearest(p.addr, 1).alloc),
            },
            (_, Some(prov)) => {
                let a = self.allocation(prov.alloc);
                if p.addr != a.base || !a.allocator.is_heap() {
                    return FreeOutcome::Bug(BugClass::IF, Some(a.id));
                }
                match a.state {
                    AllocState::Freed(_) => return FreeOutcome::Bug(BugClass::DF, Some(a.id)),
                    AllocState::OutOfScope => return FreeOutcome::Bug(BugClass::IF, Some(a.id)),
                    AllocState::Live => {}
                }
                if a.allocator != Allocator::from_api(api) {
                    return FreeOutcome::Bug(BugClass::IF, Some(a.id));
                }
                a.id
            }
        };
        self.release(target);
        FreeOutcome::Freed(target)
    }

    fn release(&mut self, id: AllocId) {
        self.free_seq += 1;
        let seq = self.free_seq;
        let (base, payload) = {
            let a = &mut self.allocs[id.0 as usize];
            a.state = AllocState::Freed(seq);
            (a.base, a.size.div_ceil(self.cfg.granule) * self.cfg.granule)
        };
        self.shadow.fill(base, base + payload, ShadowState::Freed);
        self.quarantine.push_back(id);
        self.quarantine_bytes += payload;
        while self.quarantine_bytes > self.cfg.quarantine {
            let Some(old) = self.quarantine.pop_front() else { break };
            let (lo, hi, seg, payload) = {
                let a = self.allocation(old);
                (a.chunk_lo, a.chunk_hi, a.seg, self.round(a.size))
            };
            self.quarantine_bytes -= payload;
            if let Some(SegKeyRepr(key)) = seg {
                let s = self.segment(key);
                s.free.push((lo - s.base, hi - lo));
            }
        }
    }

    /// Opens a stack frame for thread `tid`.
    pub fn push_frame(&mut self, tid: u32) {
        let bump = self.segment(SegKey::Stack(tid)).bump;
        let frames = self.stacks.entry(tid).or_default();
        if frames.is_empty() {
            frames.push(Frame::default());
        }
        frames.push(Frame {
            start: bump,
            allocs: Vec::new(),
        });
    }

    /// Closes the innermost frame: its arrays go out of scope and the stack
    /// space becomes reusable. Closing the base frame is a no-op.
    pub fn pop_frame(&mut self, tid: u32) {
        let Some(frames) = self.stacks.get_mut(&tid) else { return };
        if frames.len() <= 1 {
            return;
        }
        let f = frames.pop().unwrap();
        self.scope_exit(SegKey::Stack(tid), f.start, &f.allocs);
    }

    /// Releases every frame of `tid`, as when the thread exits.
    pub fn thread_exit(&mut self, tid: u32) {
        let Some(mut frames) = self.stacks.remove(&tid) else { return };
        while let Some(f) = frames.pop() {
            self.scope_exit(SegKey::Stack(tid), f.start, &f.allocs);
        }
    }

    fn scope_exit(&mut self, key: SegKey, start: u64, allocs: &[AllocId]) {
        for id in allocs {
            let a = &mut self.allocs[id.0 as usize];
            a.state = AllocState::OutOfScope;
            let (lo, hi) = (a.chunk_lo, a.chunk_hi);
            self.chunks.remove(&lo);
            self.shadow.fill(lo, hi, ShadowState::OutOfScope);
        }
        let seg = self.segment(key);
        seg.bump = start;
        seg.free.clear();
    }

    /// Ends the current block: shared arrays go out of scope.
    pub fn end_block(&mut self) {
        let ids = std::mem::take(&mut self.shared_allocs);
        self.scope_exit(SegKey::Shared, 0, &ids);
    }

    /// Ends the current task: compiler-introduced arrays go out of scope.
    pub fn end_task(&mut self) {
        let ids = std::mem::take(&mut self.compiler_allocs);
        self.scope_exit(SegKey::Compiler, 0, &ids);
    }

    pub fn read_value(&self, addr: u64, elem: ScalarType) -> Value {
        let mut b = [0u8; 8];
        let n = elem.size() as usize;
        self.data.read(addr, &mut b[..n]);
        match elem {
            ScalarType::I32 => Value::Int(i32::from_le_bytes(b[..4].try_into().unwrap()) as i64),
            ScalarType::I64 => Value::Int(i64::from_le_bytes(b)),
            ScalarType::F32 => Value::Float(f32::from_le_bytes(b[..4].try_into().unwrap()) as f64),
            ScalarType::F64 => Value::Float(f64::from_le_bytes(b)),
        }
    }

    pub fn write_value(&mut self, addr: u64, elem: ScalarType, v: Value) {
        let bytes = encode(elem, v);
        self.data.write(addr, &bytes[..elem.size() as usize]);
    }
}

/// Little-endian encoding of `v` as `elem`, in the first `elem.size()` bytes.
pub fn encode(elem: ScalarType, v: Value) -> [u8; 8] {
    let mut out = [0u8; 8];
    match elem {
        ScalarType::I32 => out[..4].copy_from_slice(&(v.as_int() as i32).to_le_bytes()),
        ScalarType::I64 => out.copy_from_slice(&v.as_int().to_le_bytes()),
        ScalarType::F32 => out[..4].copy_from_slice(&(v.as_float() as f32).to_le_bytes()),
        ScalarType::F64 => out.copy_from_slice(&v.as_float().to_le_bytes()),
    }
    out
}

fn seg_name(k: SegKey) -> &'static str {
    match k {
        SegKey::Host => "host heap",
        SegKey::Device(_) => "device heap",
        SegKey::Stack(_) => "stack",
        SegKey::Shared => "shared",
        SegKey::Compiler => "compiler",
    }
}

/// Signed distance of the access [addr, addr+size) from the object
/// [lo, hi): positive above, negative below, zero when overlapping an edge.
pub fn spatial_distance(addr: u64, size: u64, lo: u64, hi: u64) -> i64 {
    let addr = addr as i128;
    let (lo, hi) = (lo as i128, hi as i128);
    let end = addr + size as i128;
    let d = if addr >= hi {
        addr - hi
    } else if end <= lo {
        -(lo - end)
    } else {
        0
    };
    d.clamp(i64::MIN as i128, i64::MAX as i128) as i64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rt(mode: DetectorMode) -> Runtime {
        Runtime::new(SanConfig::default(), mode)
    }

    fn host(rt: &mut Runtime, bytes: u64) -> Ptr {
        rt.alloc(bytes, MemorySpace::GlobalHost, Allocator::HostApi, SegKey::Host, ScalarType::F32, &[])
            .unwrap()
    }

    #[test]
    fn alloc_free_no_report() {
        let mut r = rt(DetectorMode::Exact);
        let p = host(&mut r, 64);
        assert!(matches!(r.free(p, HeapApi::Host), FreeOutcome::Freed(_)));
        assert_eq!(r.allocation(p.prov.unwrap().alloc).state, AllocState::Freed(1));
    }

    #[test]
    fn double_free_reported_in_both_modes() {
        for mode in [DetectorMode::Redzone, DetectorMode::Exact] {
            let mut r = rt(mode);
            let p = host(&mut r, 64);
            r.free(p, HeapApi::Host);
            assert!(matches!(r.free(p, HeapApi::Host), FreeOutcome::Bug(BugClass::DF, _)));
        }
    }

    #[test]
    fn mismatched_allocator_is_invalid_free_in_exact_mode() {
        let mut r = rt(DetectorMode::Exact);
        let p = r
            .alloc(64, MemorySpace::GlobalDevice, Allocator::DeviceMalloc, SegKey::Device(0), ScalarType::F32, &[])
            .unwrap();
        assert!(matches!(r.free(p, HeapApi::Host), FreeOutcome::Bug(BugClass::IF, _)));
    }

    #[test]
    fn first_redzone_byte_is_bo_in_both_modes() {
        for mode in [DetectorMode::Redzone, DetectorMode::Exact] {
            let mut r = rt(mode);
            let p = host(&mut r, 64);
            let q = p.offset_elems(16);
            assert_eq!(r.check_access(&q, 4).unwrap().0, BugClass::BO, "{mode:?}");
            assert!(r.check_access(&p.offset_elems(15), 4).is_none());
        }
    }

    #[test]
    fn far_access_into_live_neighbour() {
        for (mode, expect) in [(DetectorMode::Redzone, None), (DetectorMode::Exact, Some(BugClass::OOB_RW))] {
            let mut r = rt(mode);
            let p = host(&mut r, 64);
            let _gap = host(&mut r, 4096);
            let q = host(&mut r, 64);
            let far = Ptr {
                addr: q.addr + 8,
                ..p
            };
            assert!(far.addr >= p.addr + 64 + 4096);
            assert_eq!(r.check_access(&far, 4).map(|x| x.0), expect);
        }
    }

    #[test]
    fn immediate_uaf_detected_by_both() {
        for mode in [DetectorMode::Redzone, DetectorMode::Exact] {
            let mut r = rt(mode);
            let p = host(&mut r, 64);
            r.free(p, HeapApi::Host);
            assert_eq!(r.check_access(&p, 4).unwrap().0, BugClass::UAF);
        }
    }

    #[test]
    fn quarantine_eviction_enables_reuse() {
        let mut r = rt(DetectorMode::Redzone);
        let p = host(&mut r, 64);
        r.free(p, HeapApi::Host);
        let big = host(&mut r, 300_000);
        r.free(big, HeapApi::Host);
        assert_eq!(r.quarantine_bytes(), 0);
        let again = host(&mut r, 64);
        assert_eq!(again.addr, p.addr);
        assert!(r.check_access(&p, 4).is_none());
    }

    #[test]
    fn partial_granule_is_addressable_in_redzone_mode() {
        let mut r = rt(DetectorMode::Redzone);
        let p = host(&mut r, 60);
        assert!(r.check_access(&p.offset_elems(15), 4).is_none());
        let mut e = rt(DetectorMode::Exact);
        let p = host(&mut e, 60);
        assert_eq!(e.check_access(&p.offset_elems(15), 4).unwrap().0, BugClass::BO);
    }

    #[test]
    fn stack_scope_exit_marks_out_of_scope() {
        let mut r = rt(DetectorMode::Redzone);
        r.push_frame(0);
        let p = r
            .alloc(16, MemorySpace::LocalStatic, Allocator::Stack, SegKey::Stack(0), ScalarType::I32, &[])
            .unwrap();
        r.pop_frame(0);
        assert_eq!(r.check_access(&p, 4).unwrap().0, BugClass::UAS);
    }

    #[test]
    fn values_round_trip_through_memory() {
        let mut r = rt(DetectorMode::Exact);
        let p = host(&mut r, 64);
        r.write_value(p.addr, ScalarType::I32, Value::Int(-7));
        assert_eq!(r.read_value(p.addr, ScalarType::I32), Value::Int(-7));
        r.write_value(p.addr, ScalarType::F64, Value::Float(2.5));
        assert_eq!(r.read_value(p.addr, ScalarType::F64), Value::Float(2.5));
    }
}
