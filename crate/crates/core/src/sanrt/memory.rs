use rustc_hash::FxHashMap;

const PAGE: u64 = 4096;

/// Sparse byte-addressed memory. Untouched pages read as zero.
#[derive(Clone, Debug, Default)]
pub struct PagedMemory {
    pages: FxHashMap<u64, Box<[u8; PAGE as usize]>>,
}

impl PagedMemory {
    pub fn read(&self, addr: u64, out: &mut [u8]) {
        for (i, b) in out.iter_mut().enumerate() {
            let a = addr.wrapping_add(i as u64);
            *b = match self.pages.get(&(a / PAGE)) {
                Some(p) => p[(a % PAGE) as usize],
                None => 0,
            };
        }
    }

    pub fn write(&mut self, addr: u64, bytes: &[u8]) {
        for (i, b) in bytes.iter().enumerate() {
            let a = addr.wrapping_add(i as u64);
            let page = self
                .pages
                .entry(a / PAGE)
                .or_insert_with(|| Box::new([0; PAGE as usize]));
            page[(a % PAGE) as usize] = *b;
        }
    }

    /// Zeroes a range, touching only pages that already exist.
    pub fn zero(&mut self, addr: u64, len: u64) {
        if len == 0 {
            return;
        }
        let end = addr + len;
        let mut a = addr;
        while a < end {
            let page_end = (a / PAGE + 1) * PAGE;
            let stop = page_end.min(end);
            if let Some(p) = self.pages.get_mut(&(a / PAGE)) {
                p[(a % PAGE) as usize..(a % PAGE + (stop - a)) as usize].fill(0);
            }
            a = stop;
        }
    }

    pub fn touched_pages(&self) -> usize {
        self.pages.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum ShadowState {
    Unmapped = 0,
    Addressable = 1,
    Redzone = 2,
    Freed = 3,
    OutOfScope = 4,
}

impl ShadowState {
    fn from_u8(v: u8) -> Self {
        match v {
            1 => ShadowState::Addressable,
            2 => ShadowState::Redzone,
            3 => ShadowState::Freed,
            4 => ShadowState::OutOfScope,
            _ => ShadowState::Unmapped,
        }
    }
}

/// One state byte per granule, stored in pages of 4096 granules.
#[derive(Clone, Debug)]
pub struct ShadowMemory {
    granule: u64,
    pages: FxHashMap<u64, Box<[u8; PAGE as usize]>>,
}

impl ShadowMemory {
    pub fn new(granule: u64) -> Self {
        ShadowMemory {
            granule,
            pages: FxHashMap::default(),
        }
    }

    pub fn get_granule(&self, g: u64) -> ShadowState {
        match self.pages.get(&(g / PAGE)) {
            Some(p) => ShadowState::from_u8(p[(g % PAGE) as usize]),
            None => ShadowState::Unmapped,
        }
    }

    pub fn get(&self, addr: u64) -> ShadowState {
        self.get_granule(addr / self.granule)
    }

    /// Marks every granule overlapping [lo, hi).
    pub fn fill(&mut self, lo: u64, hi: u64, st: ShadowState) {
        if hi <= lo {
            return;
        }
        let first = lo / self.granule;
        let last = (hi - 1) / self.granule;
        let mut g = first;
        while g <= last {
            let page_end = (g / PAGE + 1) * PAGE;
            let stop = page_end.min(last + 1);
            let page = self
                .pages
                .entry(g / PAGE)
                .or_insert_with(|| Box::new([0; PAGE as usize]));
            page[(g % PAGE) as usize..(g % PAGE + (stop - g)) as usize].fill(st as u8);
            g = stop;
        }
    }
}
