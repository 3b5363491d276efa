//! Blob layout: scalar arguments first (little-endian, declared width), then
//! each buffer as a `u32` byte length followed by its contents.

use serde::{Deserialize, Serialize};

use crate::exec::{Arg, Inputs};
use crate::kir::{GridConfig, Kernel, ParamKind, ScalarType};

/// Largest buffer a blob can describe.
pub const MAX_BUFFER_BYTES: u32 = 4096;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Slot {
    Scalar(ScalarType),
    /// `min_elems` pads short buffers so the harness can keep accesses
    /// that are not under test in bounds.
    Buffer { elem: ScalarType, min_elems: u32 },
}

/// Maps kernel parameters to regions of an input blob.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputLayout {
    pub names: Vec<String>,
    pub slots: Vec<Slot>,
}

impl InputLayout {
    pub fn for_kernel(k: &Kernel) -> Self {
        let mut names = Vec::new();
        let mut slots = Vec::new();
        for p in &k.params {
            names.push(p.name.clone());
            slots.push(match &p.kind {
                ParamKind::Scalar(t) => Slot::Scalar(*t),
                ParamKind::Buffer { elem, .. } => Slot::Buffer {
                    elem: *elem,
                    min_elems: 0,
                },
            });
        }
        InputLayout { names, slots }
    }

    /// Sets the minimum element count of buffer `name`.
    pub fn with_min_elems(mut self, name: &str, n: u32) -> Self {
        if let Some(i) = self.names.iter().position(|x| x == name) {
            if let Slot::Buffer { min_elems, .. } = &mut self.slots[i] {
                *min_elems = n;
            }
        }
        self
    }

    fn scalar_order(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.slots.len()).filter(|&i| matches!(self.slots[i], Slot::Scalar(_)))
    }

    fn buffer_order(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.slots.len()).filter(|&i| matches!(self.slots[i], Slot::Buffer { .. }))
    }

    /// Decodes any byte string. Missing bytes read as zero and buffer
    /// lengths are clamped to what the blob holds, to `MAX_BUFFER_BYTES`
    /// and to the slot minimum.
    pub fn decode(&self, bytes: &[u8]) -> Inputs {
        let mut r = Reader { bytes, pos: 0 };
        let mut args: Vec<Option<Arg>> = vec![None; self.slots.len()];
        for i in self.scalar_order() {
            let Slot::Scalar(t) = self.slots[i] else { unreachable!() };
            let raw = r.take(t.size() as usize);
            args[i] = Some(match t {
                ScalarType::I32 => Arg::Int(i32::from_le_bytes(raw[..4].try_into().unwrap()) as i64),
                ScalarType::I64 => Arg::Int(i64::from_le_bytes(raw[..8].try_into().unwrap())),
                ScalarType::F32 => Arg::Float(f32::from_le_bytes(raw[..4].try_into().unwrap()) as f64),
                ScalarType::F64 => Arg::Float(f64::from_le_bytes(raw[..8].try_into().unwrap())),
            });
        }
        for i in self.buffer_order() {
            let Slot::Buffer { elem, min_elems } = self.slots[i] else { unreachable!() };
            let declared = u32::from_le_bytes(r.take(4)[..4].try_into().unwrap());
            let avail = (bytes.len() - r.pos.min(bytes.len())) as u32;
            let len = declared.min(MAX_BUFFER_BYTES).min(avail) as usize;
            let mut data = bytes[r.pos.min(bytes.len())..][..len].to_vec();
            r.pos += len;
            let min_bytes = min_elems as usize * elem.size() as usize;
            if data.len() < min_bytes {
                data.resize(min_bytes, 0);
            }
            args[i] = Some(Arg::Buffer(data));
        }
        Inputs::new(args.into_iter().map(|a| a.expect("every slot decoded")).collect())
    }

    /// Inverse of `decode` for well-formed inputs.
    pub fn encode(&self, inputs: &Inputs) -> Vec<u8> {
        let mut out = Vec::new();
        for i in self.scalar_order() {
            let Slot::Scalar(t) = self.slots[i] else { unreachable!() };
            let (iv, fv) = match &inputs.args[i] {
                Arg::Int(v) => (*v, *v as f64),
                Arg::Float(v) => (*v as i64, *v),
                Arg::Buffer(_) => (0, 0.0),
            };
            match t {
                ScalarType::I32 => out.extend_from_slice(&(iv as i32).to_le_bytes()),
                ScalarType::I64 => out.extend_from_slice(&iv.to_le_bytes()),
                ScalarType::F32 => out.extend_from_slice(&(fv as f32).to_le_bytes()),
                ScalarType::F64 => out.extend_from_slice(&fv.to_le_bytes()),
            }
        }
        for i in self.buffer_order() {
            let data: &[u8] = match &inputs.args[i] {
                Arg::Buffer(b) => b,
                _ => &[],
            };
            out.extend_from_slice(&(data.len() as u32).to_le_bytes());
            out.extend_from_slice(data);
        }
        out
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    /// Next `n` bytes, zero-padded past the end.
    fn take(&mut self, n: usize) -> [u8; 8] {
        let mut out = [0u8; 8];
        for (k, o) in out.iter_mut().enumerate().take(n) {
            *o = self.bytes.get(self.pos + k).copied().unwrap_or(0);
        }
        self.pos += n;
        out
    }
}

/// How the launch grid is derived for each execution.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GridSpec {
    Fixed(GridConfig),
    /// `ceil(n / threads)` blocks for the integer scalar parameter `param`.
    CeilDiv {
        param: String,
        threads: u32,
        dyn_shared_bytes: u64,
    },
}

impl GridSpec {
    /// Resolves the grid, clamping the block count to `max_blocks`. A zero
    /// dimension is passed through so launching reports it as an error.
    pub fn resolve(&self, layout: &InputLayout, inputs: &Inputs, max_blocks: u32) -> GridConfig {
        let g = match self {
            GridSpec::Fixed(g) => *g,
            GridSpec::CeilDiv {
                param,
                threads,
                dyn_shared_bytes,
            } => {
                let n = layout
                    .names
                    .iter()
                    .position(|x| x == param)
                    .and_then(|i| match inputs.args[i] {
                        Arg::Int(v) => Some(v),
                        Arg::Float(v) => Some(v as i64),
                        Arg::Buffer(_) => None,
                    })
                    .unwrap_or(0);
                let blocks = if *threads == 0 || n <= 0 {
                    0
                } else {
                    (n as u64).div_ceil(*threads as u64).min(u32::MAX as u64) as u32
                };
                GridConfig::new(blocks, *threads).with_dyn_shared(*dyn_shared_bytes)
            }
        };
        GridConfig {
            blocks: g.blocks.min(max_blocks),
            ..g
        }
    }
}
