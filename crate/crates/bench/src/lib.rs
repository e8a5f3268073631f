//! Inputs shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ropsmith_core::x86::{assemble, Op, Reg, Width};

/// `len` bytes alternating between noise and gadget-dense code, so both the
/// terminator search and the backward decode see realistic load.
pub fn synthetic_region(len: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let snippets: Vec<Vec<u8>> = Reg::ALL
        .into_iter()
        .filter(|&r| r != Reg::Rsp)
        .flat_map(|r| {
            [
                assemble(&[Op::PopReg(r), Op::Ret]),
                assemble(&[Op::XorRegReg { dst: r, src: Reg::Rbx, width: Width::W64 }, Op::Ret]),
                assemble(&[Op::MovRegReg { dst: r, src: Reg::Rax, width: Width::W32 }, Op::Nop, Op::Ret]),
            ]
        })
        .collect();
    let mut out = Vec::with_capacity(len + 16);
    while out.len() < len {
        if rng.random_bool(0.5) {
            let n = rng.random_range(16..256);
            out.extend((0..n).map(|_| rng.random::<u8>()));
        } else {
            out.extend(&snippets[rng.random_range(0..snippets.len())]);
        }
    }
    out.truncate(len);
    out
}
