//! Vision-LSTM block: flatten a stage grid to a z-major voxel sequence,
//! pre-norm, mLSTM, output projection, residual add.

use crate::tensor::{Grid, Scalar};
use crate::Result;

use super::layers::{row_norm, row_norm_backward, sigmoid, transpose, RowNormCache};
use super::mlstm::{linear, linear_backward, project, seq_backward, seq_forward, MlstmWeights, Projections, SeqCache};
use super::ParamSet;

pub(crate) fn weights<'a, T: Scalar>(p: &'a ParamSet<T>, prefix: &str, heads: usize) -> MlstmWeights<'a, T> {
    let w = |s: &str| p.w(&format!("{prefix}.{s}"));
    MlstmWeights {
        heads,
        wq: w("wq"),
        bq: w("bq"),
        wk: w("wk"),
        bk: w("bk"),
        wv: w("wv"),
        bv: w("bv"),
        wo: w("wo"),
        bo: w("bo"),
        wi: w("wi"),
        bi: w("bi"),
        wf: w("wf"),
        bf: w("bf"),
    }
}

pub struct VilCache<T> {
    prefix: String,
    dims: [usize; 3],
    norm: RowNormCache<T>,
    xn: Vec<T>,
    proj: Projections<T>,
    seq: SeqCache<T>,
    gate: Vec<T>,
    h: Vec<T>,
}

/// Forward one block. `reverse` traverses the sequence back to front.
pub fn vil_block<T: Scalar>(
    p: &ParamSet<T>,
    prefix: &str,
    heads: usize,
    reverse: bool,
    x: &Grid<T>,
) -> Result<(Grid<T>, VilCache<T>)> {
    let c = x.channels;
    let n = x.voxels();
    let tokens = transpose(&x.data, c, n);
    let (xn, norm) = row_norm(&tokens, c, p.w(&format!("{prefix}.norm.g")), p.w(&format!("{prefix}.norm.b")));
    let w = weights(p, prefix, heads);
    let proj = project(&w, &xn, n);
    let seq = seq_forward(&proj, heads, reverse)?;
    let gate: Vec<T> = proj.o.iter().map(|&v| sigmoid(v)).collect();
    let h: Vec<T> = gate.iter().zip(&seq.htilde).map(|(a, b)| *a * *b).collect();
    let out = linear(&h, n, p.w(&format!("{prefix}.wout")), p.w(&format!("{prefix}.bout")));
    let y: Vec<T> = tokens.iter().zip(&out).map(|(a, b)| *a + *b).collect();
    let grid = Grid::from_vec(c, x.dims, transpose(&y, n, c));
    let cache = VilCache { prefix: prefix.to_string(), dims: x.dims, norm, xn, proj, seq, gate, h };
    Ok((grid, cache))
}

/// Backward one block; accumulates parameter gradients into `grads` and
/// returns the input gradient.
pub fn vil_block_backward<T: Scalar>(p: &ParamSet<T>, cache: &VilCache<T>, gy: &Grid<T>, grads: &mut ParamSet<T>) -> Grid<T> {
    let pre = &cache.prefix;
    let name = |s: &str| format!("{pre}.{s}");
    let c = gy.channels;
    let n = gy.voxels();
    let gtok = transpose(&gy.data, c, n);

    let mut gh = vec![T::zero(); n * c];
    let (gw, gb) = linear_backward(&cache.h, n, p.w(&name("wout")), &gtok, Some(&mut gh));
    grads.accumulate(&name("wout"), &gw);
    grads.accumulate(&name("bout"), &gb);

    let mut g_ht = vec![T::zero(); n * c];
    let mut g_o = vec![T::zero(); n * c];
    for i in 0..n * c {
        let o = cache.gate[i];
        g_ht[i] = gh[i] * o;
        g_o[i] = gh[i] * cache.seq.htilde[i] * o * (T::one() - o);
    }
    let mut g = seq_backward(&cache.seq, &cache.proj, &g_ht);
    g.o = g_o;

    let mut gxn = vec![T::zero(); n * c];
    for (grad, wn, bn) in [
        (&g.q, "wq", "bq"),
        (&g.k, "wk", "bk"),
        (&g.v, "wv", "bv"),
        (&g.o, "wo", "bo"),
        (&g.ig, "wi", "bi"),
        (&g.fg, "wf", "bf"),
    ] {
        let (gw, gb) = linear_backward(&cache.xn, n, p.w(&name(wn)), grad, Some(&mut gxn));
        grads.accumulate(&name(wn), &gw);
        grads.accumulate(&name(bn), &gb);
    }
    let (gx_norm, gg, gbeta) = row_norm_backward(&cache.norm, c, p.w(&name("norm.g")), &gxn);
    grads.accumulate(&name("norm.g"), &gg);
    grads.accumulate(&name("norm.b"), &gbeta);
    let gx: Vec<T> = gtok.iter().zip(&gx_norm).map(|(a, b)| *a + *b).collect();
    Grid::from_vec(c, cache.dims, transpose(&gx, n, c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ArchitectureConfig};
    use crate::rng::rng_from_seed;
    use rand::Rng as _;

    fn block_params() -> ParamSet<f64> {
        let m = build_model(&ArchitectureConfig::default(), &mut rng_from_seed(11)).unwrap();
        let mut out = ParamSet::new();
        for (k, p) in m.params.iter() {
            if let Some(rest) = k.strip_prefix("enc.1.vil.0.") {
                out.insert(format!("b.{rest}"), p.tag, p.tensor.cast());
            }
        }
        out
    }

    fn rand_grid(c: usize, dims: [usize; 3], seed: u64) -> Grid<f64> {
        let mut rng = rng_from_seed(seed);
        let n = c * dims.iter().product::<usize>();
        Grid::from_vec(c, dims, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn zero_output_projection_is_identity() {
        let mut p = block_params();
        p.w_mut("b.wout").iter_mut().for_each(|v| *v = 0.0);
        let x = rand_grid(16, [4, 4, 4], 1);
        let (y, _) = vil_block(&p, "b", 2, false, &x).unwrap();
        assert_eq!(y.dims, [4, 4, 4]);
        assert_eq!(y.channels, 16);
        assert_eq!(y.data, x.data);
    }

    #[test]
    fn reversed_traversal_equals_reversed_sequence() {
        let p = block_params();
        // two voxels along x
        let x = rand_grid(16, [1, 1, 2], 2);
        let mut swapped = x.clone();
        for c in 0..16 {
            swapped.channel_mut(c).reverse();
        }
        let (fwd_on_swapped, _) = vil_block(&p, "b", 2, false, &swapped).unwrap();
        let (rev, _) = vil_block(&p, "b", 2, true, &x).unwrap();
        for c in 0..16 {
            let mut a = fwd_on_swapped.channel(c).to_vec();
            a.reverse();
            for (u, v) in a.iter().zip(rev.channel(c)) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let p = block_params();
        let x = rand_grid(16, [2, 1, 2], 3);
        let r = rand_grid(16, [2, 1, 2], 4);
        let loss = |p: &ParamSet<f64>, x: &Grid<f64>| -> f64 {
            let (y, _) = vil_block(p, "b", 2, true, x).unwrap();
            y.data.iter().zip(&r.data).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = vil_block(&p, "b", 2, true, &x).unwrap();
        let mut grads = p.zeros_like();
        let gx = vil_block_backward(&p, &cache, &r, &mut grads);
        let eps = 1e-6;
        let mut rng = rng_from_seed(9);
        for name in p.names().cloned().collect::<Vec<_>>() {
            let len = p.w(&name).len();
            for _ in 0..6 {
                let idx = rng.gen_range(0..len);
                let mut a = p.clone();
                a.w_mut(&name)[idx] += eps;
                let mut b = p.clone();
                b.w_mut(&name)[idx] -= eps;
                let fd = (loss(&a, &x) - loss(&b, &x)) / (2.0 * eps);
                let an = grads.w(&name)[idx];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(rel < 1e-3 || (fd - an).abs() < 1e-8, "{name}[{idx}] fd {fd} an {an}");
            }
        }
        for idx in [0, 5, 17, 40, 63] {
            let mut a = x.clone();
            a.data[idx] += eps;
            let mut b = x.clone();
            b.data[idx] -= eps;
            let fd = (loss(&p, &a) - loss(&p, &b)) / (2.0 * eps);
            let an = gx.data[idx];
            assert!((fd - an).abs() / fd.abs().max(1e-6) < 1e-3, "x[{idx}] fd {fd} an {an}");
        }
    }
}
