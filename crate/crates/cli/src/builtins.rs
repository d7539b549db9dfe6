//! Handlers every `forge agent run` process registers besides `train`.
//!
//! `user_fn:synth` produces labelled 2-D points. Parameters: `count` (64),
//! `layout` (`xor` or `blobs`, default `xor`), `spread` (0.3), `seed`
//! (mixed with the task id, so two tasks never emit the same points) and
//! `work_us`, a per-sample delay standing in for an expensive producer.

use std::time::Duration;

use forge_core::dataset::sample;
use forge_core::store::{Document, TagValue};
use forge_core::workflow::agent::{HandlerRegistry, TaskContext};
use forge_core::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_xorshift::XorShiftRng;

pub fn registry() -> HandlerRegistry {
    let mut r = HandlerRegistry::with_train();
    r.register_user_fn("synth", synth)
        .expect("fresh registry has no synth handler");
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// Four clusters on the corners of a square; opposite corners share a
    /// class, so no single linear cut separates them.
    Xor,
    /// Two clusters, one per class.
    Blobs,
}

impl Layout {
    fn parse(s: &str) -> Result<Layout> {
        match s {
            "xor" => Ok(Layout::Xor),
            "blobs" => Ok(Layout::Blobs),
            _ => Err(Error::InvalidArgument(format!("unknown layout `{s}`"))),
        }
    }
}

/// `n` points with their class, reproducible from `seed`.
pub fn points(layout: Layout, n: usize, spread: f64, seed: u64) -> Vec<([f32; 2], usize)> {
    let mut rng = XorShiftRng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spread.max(0.0)).expect("finite spread");
    (0..n)
        .map(|_| {
            let corner: u8 = rng.random_range(0..4);
            let (cx, cy, class) = match (layout, corner) {
                (Layout::Xor, c) => {
                    let (sx, sy) = (c & 1, c >> 1);
                    (sign(sx), sign(sy), (sx ^ sy) as usize)
                }
                (Layout::Blobs, c) => {
                    let k = (c & 1) as usize;
                    (sign(k as u8), sign(k as u8), k)
                }
            };
            let x = cx + noise.sample(&mut rng);
            let y = cy + noise.sample(&mut rng);
            ([x as f32, y as f32], class)
        })
        .collect()
}

fn sign(bit: u8) -> f64 {
    if bit == 0 {
        -1.5
    } else {
        1.5
    }
}

/// FNV-1a; stable across builds, unlike the std hasher.
fn mix(seed: u64, s: &str) -> u64 {
    s.bytes()
        .fold(seed ^ 0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

pub fn synth(ctx: &mut TaskContext<'_>) -> Result<()> {
    let count = ctx.param_u64("count", 64)? as usize;
    let layout = Layout::parse(ctx.param_str("layout")?.unwrap_or("xor"))?;
    let spread = ctx.param_f64("spread", 0.3)?;
    let seed = mix(ctx.param_u64("seed", 0)?, &ctx.task.spec.task_id);
    let work = Duration::from_micros(ctx.param_u64("work_us", 0)?);
    let docs = points(layout, count, spread, seed)
        .into_iter()
        .map(|(p, class)| {
            if !work.is_zero() {
                std::thread::sleep(work);
            }
            let mut d = Document::inline("", sample::encode_features(&p));
            d.label = Some(class.to_string());
            d.tags.insert("synth".into(), TagValue::Bool(true));
            d
        })
        .collect();
    ctx.emit(docs)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn points_are_reproducible_and_balanced() {
        let a = points(Layout::Xor, 400, 0.3, 9);
        assert_eq!(a, points(Layout::Xor, 400, 0.3, 9));
        assert_ne!(a, points(Layout::Xor, 400, 0.3, 10));
        let ones = a.iter().filter(|(_, c)| *c == 1).count();
        assert!((150..250).contains(&ones), "{ones}");
        // xor: the class is the parity of the quadrant.
        for (p, c) in &a {
            if p[0].abs() > 0.5 && p[1].abs() > 0.5 {
                assert_eq!(*c, ((p[0] > 0.0) ^ (p[1] > 0.0)) as usize, "{p:?}");
            }
        }
    }

    #[test]
    fn task_ids_change_the_seed() {
        assert_ne!(mix(0, "a"), mix(0, "b"));
        assert_eq!(mix(3, "a"), mix(3, "a"));
    }
}
