//! Scratch diagnostic: step-size sweep on the worst-disagreeing entry.

use attnclust::attention::{sab, CompatKind, MabParams};
use attnclust::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut r = ChaCha8Rng::seed_from_u64(11);
    let p = MabParams::init(4, 2, CompatKind::Multiplicative, &mut r).unwrap();
    let x = Tensor::uniform(4, 4, -1.0, 1.0, &mut r);
    let flat = p.flatten();

    let eval = |tensors: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let ids: Vec<_> = tensors
            .iter()
            .map(|t| g.leaf(t.clone().with_requires_grad()))
            .collect();
        let bound = p.bind_slice(&ids).unwrap();
        let xid = g.constant(x.clone());
        let out = sab(&mut g, xid, &bound).unwrap();
        let sq = g.mul(out, out).unwrap();
        let loss = g.sum_all(sq);
        g.value(loss).scalar().unwrap()
    };

    let mut g = Graph::new();
    let ids: Vec<_> = flat
        .iter()
        .map(|t| g.leaf(t.clone().with_requires_grad()))
        .collect();
    let bound = p.bind_slice(&ids).unwrap();
    let xid = g.constant(x.clone());
    let out = sab(&mut g, xid, &bound).unwrap();
    let sq = g.mul(out, out).unwrap();
    let loss = g.sum_all(sq);
    g.backward(loss).unwrap();

    // Find worst entry at h = 1e-6.
    let h0 = 1e-6;
    let mut worst = (0usize, 0usize, 0.0f64);
    let mut scratch = flat.clone();
    for (pi, pt) in flat.iter().enumerate() {
        let analytic = g.grad(ids[pi]).unwrap();
        for e in 0..pt.len() {
            let orig = pt.data()[e];
            scratch[pi].data_mut()[e] = orig + h0;
            let fp = eval(&scratch);
            scratch[pi].data_mut()[e] = orig - h0;
            let fm = eval(&scratch);
            scratch[pi].data_mut()[e] = orig;
            let numeric = (fp - fm) / (2.0 * h0);
            let a = analytic[e];
            let abs = (a - numeric).abs();
            if abs > worst.2 {
                worst = (pi, e, abs);
            }
        }
    }
    let (pi, e, _) = worst;
    let analytic = g.grad(ids[pi]).unwrap()[e];
    println!("worst abs-disagreement: param {pi} entry {e}, analytic {analytic:.12e}");
    for h in [1e-3, 1e-4, 1e-5, 1e-6, 1e-7] {
        let orig = flat[pi].data()[e];
        scratch[pi].data_mut()[e] = orig + h;
        let fp = eval(&scratch);
        scratch[pi].data_mut()[e] = orig - h;
        let fm = eval(&scratch);
        scratch[pi].data_mut()[e] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        println!("  h={h:.0e}: numeric {numeric:.12e}  (diff {:.3e})", numeric - analytic);
    }
}
