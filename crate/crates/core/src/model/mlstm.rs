//! Stabilized mLSTM cell with exponential input gate and log-sigmoid
//! forget gate. Per head with key dimension `d`:
//!
//! ```text
//! m_t  = max(logσ(f̃) + m_{t-1}, ĩ)          (m_0 = ĩ)
//! f'   = exp(logσ(f̃) + m_{t-1} - m_t),  i' = exp(ĩ - m_t)
//! C_t  = f' C_{t-1} + i' v kᵀ/√d
//! n_t  = f' n_{t-1} + i' k/√d
//! h̃_t  = C_t q / max(|n_tᵀ q|, 1)
//! h_t  = σ(o) ⊙ h̃_t
//! ```

use crate::tensor::{matmul, Scalar};
use crate::{Error, Result};

use super::layers::{log_sigmoid, sigmoid};

/// Recurrent state, `heads` blocks of (C: d×d, n: d, m).
#[derive(Clone, Debug, PartialEq)]
pub struct MlstmState<T> {
    pub heads: usize,
    pub head_dim: usize,
    pub c: Vec<T>,
    pub n: Vec<T>,
    pub m: Vec<T>,
}

impl<T: Scalar> MlstmState<T> {
    pub fn new(heads: usize, head_dim: usize) -> Self {
        MlstmState {
            heads,
            head_dim,
            c: vec![T::zero(); heads * head_dim * head_dim],
            n: vec![T::zero(); heads * head_dim],
            m: vec![T::neg_infinity(); heads],
        }
    }
}

/// Projection weights feeding the cell. `w*` are row-major `(out, in)`.
#[derive(Clone, Copy, Debug)]
pub struct MlstmWeights<'a, T> {
    pub heads: usize,
    pub wq: &'a [T],
    pub bq: &'a [T],
    pub wk: &'a [T],
    pub bk: &'a [T],
    pub wv: &'a [T],
    pub bv: &'a [T],
    pub wo: &'a [T],
    pub bo: &'a [T],
    pub wi: &'a [T],
    pub bi: &'a [T],
    pub wf: &'a [T],
    pub bf: &'a [T],
}

impl<T: Scalar> MlstmWeights<'_, T> {
    pub fn width(&self) -> usize {
        self.bq.len()
    }
}

/// `y = x Wᵀ + b` for `rows` row vectors.
pub(crate) fn linear<T: Scalar>(x: &[T], rows: usize, w: &[T], b: &[T]) -> Vec<T> {
    let out = b.len();
    let inp = w.len() / out;
    let mut y = Vec::with_capacity(rows * out);
    for _ in 0..rows {
        y.extend_from_slice(b);
    }
    matmul(x, false, w, true, &mut y, rows, inp, out, true);
    y
}

/// Gradients of [`linear`]; accumulates `gy W` into `gx`.
pub(crate) fn linear_backward<T: Scalar>(x: &[T], rows: usize, w: &[T], gy: &[T], gx: Option<&mut [T]>) -> (Vec<T>, Vec<T>) {
    let out = gy.len() / rows;
    let inp = w.len() / out;
    let mut gw = vec![T::zero(); out * inp];
    matmul(gy, true, x, false, &mut gw, out, rows, inp, false);
    let mut gb = vec![T::zero(); out];
    for r in 0..rows {
        for (g, v) in gb.iter_mut().zip(&gy[r * out..(r + 1) * out]) {
            *g += *v;
        }
    }
    if let Some(gx) = gx {
        matmul(gy, false, w, false, gx, rows, out, inp, true);
    }
    (gw, gb)
}

/// Token-major projections of an `(N, C)` input.
pub(crate) struct Projections<T> {
    pub q: Vec<T>,
    pub k: Vec<T>,
    pub v: Vec<T>,
    pub o: Vec<T>,
    pub ig: Vec<T>,
    pub fg: Vec<T>,
}

pub(crate) fn project<T: Scalar>(w: &MlstmWeights<'_, T>, x: &[T], rows: usize) -> Projections<T> {
    Projections {
        q: linear(x, rows, w.wq, w.bq),
        k: linear(x, rows, w.wk, w.bk),
        v: linear(x, rows, w.wv, w.bv),
        o: linear(x, rows, w.wo, w.bo),
        ig: linear(x, rows, w.wi, w.bi),
        fg: linear(x, rows, w.wf, w.bf),
    }
}

struct StepAux<T> {
    fp: T,
    ip: T,
    s: T,
    den: T,
}

/// One head update in place; writes `h̃` and returns the scalars needed
/// by the backward pass.
#[allow(clippy::too_many_arguments)]
fn head_step<T: Scalar>(
    d: usize,
    c: &mut [T],
    n: &mut [T],
    m: &mut T,
    q: &[T],
    k: &[T],
    v: &[T],
    ig: T,
    fg: T,
    ht: &mut [T],
) -> StepAux<T> {
    let scale = T::one() / T::lit(d as f64).sqrt();
    let (m_new, fp, ip) = if m.is_infinite() && *m < T::zero() {
        (ig, T::zero(), T::one())
    } else {
        let a = log_sigmoid(fg) + *m;
        let mm = a.max(ig);
        (mm, (a - mm).exp(), (ig - mm).exp())
    };
    *m = m_new;
    for i in 0..d {
        let vi = ip * v[i] * scale;
        let row = &mut c[i * d..(i + 1) * d];
        for j in 0..d {
            row[j] = fp * row[j] + vi * k[j];
        }
    }
    let mut s = T::zero();
    for j in 0..d {
        n[j] = fp * n[j] + ip * k[j] * scale;
        s += n[j] * q[j];
    }
    let den = s.abs().max(T::one());
    for i in 0..d {
        let row = &c[i * d..(i + 1) * d];
        let num: T = row.iter().zip(q).map(|(a, b)| *a * *b).sum();
        ht[i] = num / den;
    }
    StepAux { fp, ip, s, den }
}

fn check_finite<T: Scalar>(x: &[T], what: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerics(format!("non-finite {what} fed to mLSTM")))
    }
}

/// One recurrence step on input vector `x` (length C).
pub fn mlstm_step<T: Scalar>(w: &MlstmWeights<'_, T>, state: &MlstmState<T>, x: &[T]) -> Result<(MlstmState<T>, Vec<T>)> {
    let c = w.width();
    let heads = w.heads;
    if x.len() != c || heads == 0 || c % heads != 0 || state.heads != heads || state.head_dim * heads != c {
        return Err(Error::Shape(format!(
            "mlstm_step: input {} / state {}x{} inconsistent with width {c}, {heads} heads",
            x.len(),
            state.heads,
            state.head_dim
        )));
    }
    check_finite(x, "input")?;
    let d = c / heads;
    let p = project(w, x, 1);
    let mut next = state.clone();
    let mut h = vec![T::zero(); c];
    for hd in 0..heads {
        let r = hd * d..(hd + 1) * d;
        head_step(
            d,
            &mut next.c[hd * d * d..(hd + 1) * d * d],
            &mut next.n[r.clone()],
            &mut next.m[hd],
            &p.q[r.clone()],
            &p.k[r.clone()],
            &p.v[r.clone()],
            p.ig[hd],
            p.fg[hd],
            &mut h[r.clone()],
        );
        for i in r {
            h[i] *= sigmoid(p.o[i]);
        }
    }
    Ok((next, h))
}

/// Gradients of a gated sequence pass: input first, then the weights in
/// `MlstmWeights` field order (wq, bq, wk, ..., bf).
pub struct MlstmGrads<T> {
    pub x: Vec<T>,
    pub weights: Vec<Vec<T>>,
}

/// Gated outputs of `rows` tokens run from the empty state; equal to
/// chaining [`mlstm_step`] over the rows (in reverse if asked).
pub fn mlstm_sequence<T: Scalar>(w: &MlstmWeights<'_, T>, x: &[T], rows: usize, reverse: bool) -> Result<Vec<T>> {
    let p = project(w, x, rows);
    let seq = seq_forward(&p, w.heads, reverse)?;
    Ok(seq.htilde.iter().zip(&p.o).map(|(h, o)| *h * sigmoid(*o)).collect())
}

/// Backward of [`mlstm_sequence`] for upstream gradient `g_h`.
pub fn mlstm_sequence_backward<T: Scalar>(w: &MlstmWeights<'_, T>, x: &[T], rows: usize, reverse: bool, g_h: &[T]) -> Result<MlstmGrads<T>> {
    let p = project(w, x, rows);
    let seq = seq_forward(&p, w.heads, reverse)?;
    let mut g_ht = vec![T::zero(); g_h.len()];
    let mut g_o = vec![T::zero(); g_h.len()];
    for i in 0..g_h.len() {
        let o = sigmoid(p.o[i]);
        g_ht[i] = g_h[i] * o;
        g_o[i] = g_h[i] * seq.htilde[i] * o * (T::one() - o);
    }
    let mut g = seq_backward(&seq, &p, &g_ht);
    g.o = g_o;
    let mut gx = vec![T::zero(); x.len()];
    let mut weights = Vec::with_capacity(12);
    for (grad, wm) in [(&g.q, w.wq), (&g.k, w.wk), (&g.v, w.wv), (&g.o, w.wo), (&g.ig, w.wi), (&g.fg, w.wf)] {
        let (gw, gb) = linear_backward(x, rows, wm, grad, Some(&mut gx));
        weights.push(gw);
        weights.push(gb);
    }
    Ok(MlstmGrads { x: gx, weights })
}

/// Per-step record of a sequence pass, indexed by step (not token).
pub(crate) struct SeqCache<T> {
    pub heads: usize,
    pub d: usize,
    pub steps: usize,
    pub reverse: bool,
    c: Vec<T>,
    n: Vec<T>,
    m: Vec<T>,
    fp: Vec<T>,
    ip: Vec<T>,
    s: Vec<T>,
    den: Vec<T>,
    /// Token-major `h̃`.
    pub htilde: Vec<T>,
}

impl<T: Scalar> SeqCache<T> {
    fn token(&self, t: usize) -> usize {
        if self.reverse {
            self.steps - 1 - t
        } else {
            t
        }
    }
}

/// Run the cell across all `N` tokens starting from the empty state.
/// Returns token-major `h̃` (before the output gate) and the cache.
pub(crate) fn seq_forward<T: Scalar>(p: &Projections<T>, heads: usize, reverse: bool) -> Result<SeqCache<T>> {
    let hc = p.ig.len();
    let steps = hc / heads;
    let width = p.q.len() / steps.max(1);
    let d = width / heads;
    for (x, what) in [(&p.q, "query"), (&p.k, "key"), (&p.v, "value"), (&p.ig, "gate"), (&p.fg, "gate")] {
        check_finite(x, what)?;
    }
    let dd = d * d;
    let mut cache = SeqCache {
        heads,
        d,
        steps,
        reverse,
        c: vec![T::zero(); steps * heads * dd],
        n: vec![T::zero(); steps * heads * d],
        m: vec![T::zero(); steps * heads],
        fp: vec![T::zero(); steps * heads],
        ip: vec![T::zero(); steps * heads],
        s: vec![T::zero(); steps * heads],
        den: vec![T::zero(); steps * heads],
        htilde: vec![T::zero(); steps * width],
    };
    let mut state = MlstmState::<T>::new(heads, d);
    for t in 0..steps {
        let tok = cache.token(t);
        for h in 0..heads {
            let col = tok * width + h * d;
            let aux = head_step(
                d,
                &mut state.c[h * dd..(h + 1) * dd],
                &mut state.n[h * d..(h + 1) * d],
                &mut state.m[h],
                &p.q[col..col + d],
                &p.k[col..col + d],
                &p.v[col..col + d],
                p.ig[tok * heads + h],
                p.fg[tok * heads + h],
                &mut cache.htilde[col..col + d],
            );
            let sh = t * heads + h;
            cache.c[sh * dd..(sh + 1) * dd].copy_from_slice(&state.c[h * dd..(h + 1) * dd]);
            cache.n[sh * d..(sh + 1) * d].copy_from_slice(&state.n[h * d..(h + 1) * d]);
            cache.m[sh] = state.m[h];
            cache.fp[sh] = aux.fp;
            cache.ip[sh] = aux.ip;
            cache.s[sh] = aux.s;
            cache.den[sh] = aux.den;
        }
    }
    if !cache.htilde.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerics("mLSTM produced non-finite output".into()));
    }
    Ok(cache)
}

/// Backpropagate `∂L/∂h̃` through the recurrence.
pub(crate) fn seq_backward<T: Scalar>(cache: &SeqCache<T>, p: &Projections<T>, g_ht: &[T]) -> Projections<T> {
    let (heads, d, steps) = (cache.heads, cache.d, cache.steps);
    let width = heads * d;
    let dd = d * d;
    let scale = T::one() / T::lit(d as f64).sqrt();
    let mut g = Projections {
        q: vec![T::zero(); p.q.len()],
        k: vec![T::zero(); p.k.len()],
        v: vec![T::zero(); p.v.len()],
        o: Vec::new(),
        ig: vec![T::zero(); p.ig.len()],
        fg: vec![T::zero(); p.fg.len()],
    };
    let zeros_c = vec![T::zero(); dd];
    let zeros_n = vec![T::zero(); d];
    let mut dck = vec![T::zero(); d];
    for h in 0..heads {
        let mut dc = vec![T::zero(); dd];
        let mut dn = vec![T::zero(); d];
        let mut dm = T::zero();
        for t in (0..steps).rev() {
            let tok = cache.token(t);
            let sh = t * heads + h;
            let col = tok * width + h * d;
            let q = &p.q[col..col + d];
            let k = &p.k[col..col + d];
            let v = &p.v[col..col + d];
            let gh = &g_ht[col..col + d];
            let ht = &cache.htilde[col..col + d];
            let ct = &cache.c[sh * dd..(sh + 1) * dd];
            let nt = &cache.n[sh * d..(sh + 1) * d];
            let (cp, np) = if t > 0 {
                let sp = (t - 1) * heads + h;
                (&cache.c[sp * dd..(sp + 1) * dd], &cache.n[sp * d..(sp + 1) * d])
            } else {
                (&zeros_c[..], &zeros_n[..])
            };
            let (fp, ip, s, den) = (cache.fp[sh], cache.ip[sh], cache.s[sh], cache.den[sh]);

            // readout h̃ = C q / den
            let dden = -gh.iter().zip(ht).map(|(a, b)| *a * *b).sum::<T>() / den;
            let ds = if s.abs() > T::one() { dden * s.signum() } else { T::zero() };
            let gq = &mut g.q[col..col + d];
            for i in 0..d {
                let dnum = gh[i] / den;
                let row = &mut dc[i * d..(i + 1) * d];
                let crow = &ct[i * d..(i + 1) * d];
                for j in 0..d {
                    row[j] += dnum * q[j];
                    gq[j] += crow[j] * dnum;
                }
            }
            for j in 0..d {
                gq[j] += ds * nt[j];
                dn[j] += ds * q[j];
            }

            // update C = f' C_prev + i' v k̂ᵀ, n = f' n_prev + i' k̂
            let mut dfp = T::zero();
            for (a, b) in dc.iter().zip(cp) {
                dfp += *a * *b;
            }
            for (a, b) in dn.iter().zip(np) {
                dfp += *a * *b;
            }
            let mut dip = T::zero();
            for i in 0..d {
                let row = &dc[i * d..(i + 1) * d];
                dck[i] = row.iter().zip(k).map(|(a, b)| *a * *b).sum::<T>() * scale;
                dip += v[i] * dck[i];
            }
            for j in 0..d {
                dip += dn[j] * k[j] * scale;
            }
            let gv = &mut g.v[col..col + d];
            for i in 0..d {
                gv[i] += ip * dck[i];
            }
            let gk = &mut g.k[col..col + d];
            for j in 0..d {
                let mut acc = dn[j];
                for i in 0..d {
                    acc += dc[i * d + j] * v[i];
                }
                gk[j] += ip * acc * scale;
            }

            // gates and stabilizer
            let ig = p.ig[tok * heads + h];
            let fg = p.fg[tok * heads + h];
            if t == 0 {
                g.ig[tok * heads + h] += dm;
                dm = T::zero();
            } else {
                let m_prev = cache.m[(t - 1) * heads + h];
                let a = log_sigmoid(fg) + m_prev;
                let dm_total = dm - dfp * fp - dip * ip;
                let mut da = dfp * fp;
                let mut dig = dip * ip;
                if a >= ig {
                    da += dm_total;
                } else {
                    dig += dm_total;
                }
                g.ig[tok * heads + h] += dig;
                g.fg[tok * heads + h] += da * sigmoid(-fg);
                dm = da;
            }
            dc.iter_mut().for_each(|x| *x *= fp);
            dn.iter_mut().for_each(|x| *x *= fp);
        }
    }
    g
}
