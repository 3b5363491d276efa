//! Byte-level mutation operators.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TestCase;

/// Mutated inputs never grow past this many bytes.
pub const MAX_INPUT_BYTES: usize = 1 << 16;

const INTERESTING_8: [i8; 9] = [-128, -1, 0, 1, 16, 32, 64, 100, 127];
const INTERESTING_16: [i16; 10] = [-32768, -129, 128, 255, 256, 512, 1000, 1024, 4096, 32767];
const INTERESTING_32: [i32; 8] = [
    i32::MIN,
    -100_663_046,
    -32769,
    32768,
    65535,
    65536,
    100_663_045,
    i32::MAX,
];
const ARITH_MAX: i64 = 35;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MutOp {
    BitFlip,
    ByteFlip,
    Arith,
    Interesting,
    BlockDup,
    BlockRemove,
    Splice,
}

impl MutOp {
    pub const ALL: [MutOp; 7] = [
        MutOp::BitFlip,
        MutOp::ByteFlip,
        MutOp::Arith,
        MutOp::Interesting,
        MutOp::BlockDup,
        MutOp::BlockRemove,
        MutOp::Splice,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MutOp::BitFlip => "bit_flip",
            MutOp::ByteFlip => "byte_flip",
            MutOp::Arith => "arith",
            MutOp::Interesting => "interesting",
            MutOp::BlockDup => "block_dup",
            MutOp::BlockRemove => "block_remove",
            MutOp::Splice => "splice",
        }
    }
}

/// One applied operator. `pos` is a bit index for bit flips and a byte
/// offset otherwise; for a splice it is the prefix length kept from the
/// parent and `partner` names the member and offset the suffix came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MutStep {
    pub op: MutOp,
    pub pos: usize,
    pub partner: Option<(u64, usize)>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    /// `None` for seeds.
    pub parent: Option<u64>,
    pub steps: Vec<MutStep>,
}

fn width<R: Rng>(rng: &mut R, len: usize) -> usize {
    let w = [1usize, 2, 4][rng.gen_range(0..3)];
    if w <= len {
        w
    } else {
        1
    }
}

fn add_le(bytes: &mut [u8], delta: i64) {
    let mut buf = [0u8; 8];
    buf[..bytes.len()].copy_from_slice(bytes);
    let v = u64::from_le_bytes(buf).wrapping_add(delta as u64);
    bytes.copy_from_slice(&v.to_le_bytes()[..bytes.len()]);
}

/// Applies `op` in place. Operators that do not fit the input (removing
/// from a one-byte input, splicing without a partner) fall back to a bit
/// flip; the returned step records what actually happened. An empty input
/// first gains one zero byte.
pub fn apply<R: Rng>(op: MutOp, bytes: &mut Vec<u8>, rng: &mut R, partner: Option<(u64, &[u8])>) -> MutStep {
    if bytes.is_empty() {
        bytes.push(0);
    }
    let len = bytes.len();
    let step = |op, pos| MutStep { op, pos, partner: None };
    match op {
        MutOp::ByteFlip => {
            let pos = rng.gen_range(0..len);
            bytes[pos] ^= 0xFF;
            step(op, pos)
        }
        MutOp::Arith => {
            let w = width(rng, len);
            let pos = rng.gen_range(0..=len - w);
            let mag = rng.gen_range(1..=ARITH_MAX);
            let delta = if rng.gen() { mag } else { -mag };
            add_le(&mut bytes[pos..pos + w], delta);
            step(op, pos)
        }
        MutOp::Interesting => {
            let w = width(rng, len);
            let pos = rng.gen_range(0..=len - w);
            let v: i64 = match w {
                1 => INTERESTING_8[rng.gen_range(0..INTERESTING_8.len())] as i64,
                2 => {
                    let all: Vec<i64> = INTERESTING_8
                        .iter()
                        .map(|&x| x as i64)
                        .chain(INTERESTING_16.iter().map(|&x| x as i64))
                        .collect();
                    all[rng.gen_range(0..all.len())]
                }
                _ => {
                    let all: Vec<i64> = INTERESTING_8
                        .iter()
                        .map(|&x| x as i64)
                        .chain(INTERESTING_16.iter().map(|&x| x as i64))
                        .chain(INTERESTING_32.iter().map(|&x| x as i64))
                        .collect();
                    all[rng.gen_range(0..all.len())]
                }
            };
            bytes[pos..pos + w].copy_from_slice(&v.to_le_bytes()[..w]);
            step(op, pos)
        }
        MutOp::BlockDup if len < MAX_INPUT_BYTES => {
            let n = rng.gen_range(1..=len.min(32).min(MAX_INPUT_BYTES - len));
            let from = rng.gen_range(0..=len - n);
            let to = rng.gen_range(0..=len);
            let block: Vec<u8> = bytes[from..from + n].to_vec();
            bytes.splice(to..to, block);
            step(op, to)
        }
        MutOp::BlockRemove if len >= 2 => {
            let n = rng.gen_range(1..=(len - 1).min(32));
            let pos = rng.gen_range(0..=len - n);
            bytes.drain(pos..pos + n);
            step(op, pos)
        }
        MutOp::Splice if partner.is_some_and(|(_, p)| !p.is_empty()) => {
            let (id, other) = partner.unwrap();
            let cut = rng.gen_range(1..=len);
            let from = rng.gen_range(0..other.len());
            bytes.truncate(cut);
            let room = MAX_INPUT_BYTES.saturating_sub(cut);
            let end = other.len().min(from + room);
            bytes.extend_from_slice(&other[from..end]);
            MutStep {
                op,
                pos: cut,
                partner: Some((id, from)),
            }
        }
        _ => {
            let pos = rng.gen_range(0..len * 8);
            bytes[pos / 8] ^= 1 << (pos % 8);
            step(MutOp::BitFlip, pos)
        }
    }
}

fn pick_partner<'a, R: Rng>(rng: &mut R, t: &TestCase, pool: &'a [TestCase]) -> Option<&'a TestCase> {
    let others: Vec<&TestCase> = pool.iter().filter(|c| c.id != t.id).collect();
    if others.is_empty() {
        None
    } else {
        Some(others[rng.gen_range(0..others.len())])
    }
}

/// Applies one randomly chosen operator. Deterministic in `(t, seed, pool)`.
pub fn mutate(t: &TestCase, seed: u64, pool: &[TestCase]) -> TestCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let op = MutOp::ALL[rng.gen_range(0..MutOp::ALL.len())];
    child(t, &mut rng, pool, &[op])
}

/// Stacks one to four random operators.
pub fn havoc<R: Rng>(t: &TestCase, rng: &mut R, pool: &[TestCase]) -> TestCase {
    let n = rng.gen_range(1..=4);
    let ops: Vec<MutOp> = (0..n).map(|_| MutOp::ALL[rng.gen_range(0..MutOp::ALL.len())]).collect();
    child(t, rng, pool, &ops)
}

fn child<R: Rng>(t: &TestCase, rng: &mut R, pool: &[TestCase], ops: &[MutOp]) -> TestCase {
    let mut bytes = t.bytes.clone();
    let mut steps = Vec::with_capacity(ops.len());
    for &op in ops {
        let partner = if op == MutOp::Splice {
            pick_partner(rng, t, pool).map(|p| (p.id, p.bytes.as_slice()))
        } else {
            None
        };
        steps.push(apply(op, &mut bytes, rng, partner));
    }
    TestCase {
        id: 0,
        bytes,
        provenance: Provenance {
            parent: Some(t.id),
            steps,
        },
        depth: t.depth + 1,
        ..TestCase::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn case(id: u64, bytes: Vec<u8>) -> TestCase {
        TestCase {
            id,
            bytes,
            ..TestCase::default()
        }
    }

    #[test]
    fn bit_flip_changes_exactly_one_bit() {
        for seed in 0..64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut b = vec![0x00];
            let s = apply(MutOp::BitFlip, &mut b, &mut rng, None);
            assert_eq!(s.op, MutOp::BitFlip);
            assert_eq!(b[0].count_ones(), 1);
        }
    }

    #[test]
    fn mutate_is_deterministic() {
        let t = case(3, vec![1, 2, 3, 4, 5, 6, 7, 8]);
        let pool = vec![t.clone(), case(4, vec![9; 8])];
        for seed in 0..200 {
            assert_eq!(mutate(&t, seed, &pool), mutate(&t, seed, &pool));
        }
    }

    #[test]
    fn splice_of_eight_byte_members_stays_within_bounds() {
        // Every (cut, from) pair the operator can draw.
        for cut in 1..=8usize {
            for from in 0..8usize {
                let len = cut + (8 - from);
                assert!((1..=16).contains(&len));
            }
        }
        let a = case(1, vec![0xAA; 8]);
        let b = case(2, vec![0xBB; 8]);
        let pool = vec![a.clone(), b.clone()];
        for seed in 0..500 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = child(&a, &mut rng, &pool, &[MutOp::Splice]);
            assert!((1..=16).contains(&c.bytes.len()));
            let s = &c.provenance.steps[0];
            assert_eq!(s.op, MutOp::Splice);
            let (pid, from) = s.partner.unwrap();
            assert_eq!(pid, 2);
            assert_eq!(c.bytes.len(), s.pos + 8 - from);
            assert!(c.bytes[..s.pos].iter().all(|&x| x == 0xAA));
            assert!(c.bytes[s.pos..].iter().all(|&x| x == 0xBB));
        }
    }

    #[test]
    fn removal_keeps_at_least_one_byte() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut b = vec![1, 2];
        for _ in 0..20 {
            apply(MutOp::BlockRemove, &mut b, &mut rng, None);
            assert!(!b.is_empty());
        }
    }

    #[test]
    fn arith_changes_a_window_by_small_delta() {
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut b = 1000i32.to_le_bytes().to_vec();
            let s = apply(MutOp::Arith, &mut b, &mut rng, None);
            assert_eq!(s.op, MutOp::Arith);
            assert_ne!(b, 1000i32.to_le_bytes().to_vec());
        }
    }
}
