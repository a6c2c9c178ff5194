//! Central finite-difference checks of tape gradients.
//!
//! The numerical side only ever evaluates the forward function, so it stays
//! independent of every backward rule it checks.

use crate::error::Result;
use crate::{Real, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Report {
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)` over all checked entries.
    pub relative_error: f64,
    /// Largest absolute difference of a single entry.
    pub max_abs_error: f64,
    pub checked: usize,
}

impl Report {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.relative_error < tolerance
    }
}

/// Entry `(input, flat_index)` to perturb.
pub type Probe = (usize, usize);

/// Compares analytic and central-difference gradients of the scalar returned by `f`.
///
/// `f` receives the tape and one leaf per entry of `inputs`. When `probes` is
/// `None` every element of every input is checked.
pub fn check<T: Real, F>(
    inputs: &[Tensor<T>],
    eps: f64,
    probes: Option<&[Probe]>,
    f: F,
) -> Result<Report>
where
    F: Fn(&Tape<T>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<T>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone())).collect();
        let out = f(&tape, &vars)?;
        Ok(tape.value(out).item().as_f64())
    };

    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;

    let all: Vec<Probe>;
    let probes = match probes {
        Some(p) => p,
        None => {
            all = inputs
                .iter()
                .enumerate()
                .flat_map(|(i, t)| (0..t.len()).map(move |k| (i, k)))
                .collect();
            &all
        }
    };

    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    let (mut diff2, mut an2, mut nu2, mut max_abs) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for &(i, k) in probes {
        let analytic = grads
            .get(vars[i])
            .map(|g| g.data()[k].as_f64())
            .unwrap_or(0.0);
        let original = work[i].data()[k];
        work[i].data_mut()[k] = T::of(original.as_f64() + eps);
        let plus = eval(&work)?;
        work[i].data_mut()[k] = T::of(original.as_f64() - eps);
        let minus = eval(&work)?;
        work[i].data_mut()[k] = original;
        let numeric = (plus - minus) / (2.0 * eps);
        let d = analytic - numeric;
        diff2 += d * d;
        an2 += analytic * analytic;
        nu2 += numeric * numeric;
        max_abs = max_abs.max(d.abs());
    }
    let scale = an2.sqrt().max(nu2.sqrt());
    let relative_error = if scale == 0.0 { 0.0 } else { diff2.sqrt() / scale };
    Ok(Report {
        relative_error,
        max_abs_error: max_abs,
        checked: probes.len(),
    })
}

/// Fixed random projection `Σ r·y` that turns a tensor output into a scalar loss.
pub fn project<T: Real>(tape: &Tape<T>, y: Var, weights: &Tensor<T>) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(y, w)?;
    Ok(tape.sum(prod))
}

/// One finite-difference case per differentiable operation, each at several shapes.
///
/// Returned as `(case name, report)`; run in `f64` so the tolerance reflects
/// the backward rules rather than single-precision rounding.
pub fn operation_suite(seed: u64) -> Result<Vec<(String, Report)>> {
    use crate::Padding;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const EPS: f64 = 1e-3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }
    // Distinct values at least 0.01 apart, so no perturbation reorders them.
    fn separated(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let mut v: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * 0.01).collect();
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            v.swap(i, j);
        }
        Tensor::new(shape, v).expect("shape")
    }
    fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| {
            let m = rng.random_range(0.05..1.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
    }

    let conv_shapes: [([usize; 4], [usize; 4], (usize, usize), Padding); 4] = [
        ([1, 3, 3, 2], [3, 3, 2, 2], (1, 1), Padding::Same),
        ([2, 5, 4, 3], [3, 3, 3, 4], (2, 2), Padding::Same),
        ([1, 6, 7, 2], [3, 3, 2, 3], (1, 2), Padding::Valid),
        ([2, 4, 4, 5], [1, 1, 5, 3], (1, 1), Padding::Same),
    ];
    for (xs, ws, stride, pad) in conv_shapes {
        let x = normal(&mut rng, &xs);
        let w = normal(&mut rng, &ws);
        let b = normal(&mut rng, &[ws[3]]);
        let probe_shape = {
            let oh = crate::conv_output_extent(xs[1], ws[0], stride.0, pad).unwrap().0;
            let ow = crate::conv_output_extent(xs[2], ws[1], stride.1, pad).unwrap().0;
            [xs[0], oh, ow, ws[3]]
        };
        let r = normal(&mut rng, &probe_shape);
        let rep = check(&[x, w, b], EPS, None, |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
            project(t, y, &r)
        })?;
        out.push((format!("conv2d {xs:?}*{ws:?} s{stride:?} {pad:?}"), rep));
    }

    for (xs, win, stride) in [
        ([1, 8, 8, 4], (2, 2), (2, 2)),
        ([2, 5, 6, 3], (3, 3), (2, 2)),
        ([1, 6, 8, 2], (3, 3), (1, 2)),
    ] {
        let x = separated(&mut rng, &xs);
        let probe = {
            let t = Tape::new();
            let v = t.constant(x.clone());
            let y = t.max_pool(v, win, stride, Padding::Same)?;
            normal(&mut rng, &t.shape(y))
        };
        let rep = check(&[x], EPS, None, |t, v| {
            let y = t.max_pool(v[0], win, stride, Padding::Same)?;
            project(t, y, &probe)
        })?;
        out.push((format!("maxpool {xs:?} {win:?} s{stride:?}"), rep));
    }

    for xs in [[1, 4, 4, 3], [2, 3, 5, 2], [3, 1, 1, 4]] {
        let x = normal(&mut rng, &xs);
        let r = normal(&mut rng, &[xs[0], 1, 1, xs[3]]);
        let rep = check(&[x], EPS, None, |t, v| {
            let y = t.global_avg_pool(v[0])?;
            project(t, y, &r)
        })?;
        out.push((format!("global_avgpool {xs:?}"), rep));
    }

    for xs in [[1, 2, 2, 1], [2, 3, 2, 3], [1, 1, 4, 2]] {
        let x = normal(&mut rng, &xs);
        let r = normal(&mut rng, &[xs[0], 2 * xs[1], 2 * xs[2], xs[3]]);
        let rep = check(&[x], EPS, None, |t, v| {
            let y = t.upsample2(v[0])?;
            project(t, y, &r)
        })?;
        out.push((format!("upsample2 {xs:?}"), rep));
    }

    for (xs, h, w) in [([1, 4, 4, 2], 3, 3), ([2, 6, 4, 1], 5, 4), ([1, 2, 6, 3], 1, 5)] {
        let x = normal(&mut rng, &xs);
        let r = normal(&mut rng, &[xs[0], h, w, xs[3]]);
        let rep = check(&[x], EPS, None, |t, v| {
            let y = t.crop(v[0], h, w)?;
            project(t, y, &r)
        })?;
        out.push((format!("crop {xs:?} -> {h}x{w}"), rep));
    }

    for (b, d, e) in [(3, 5, 4), (1, 7, 2), (4, 2, 6)] {
        let x = normal(&mut rng, &[b, d]);
        let w = normal(&mut rng, &[d, e]);
        let bias = normal(&mut rng, &[e]);
        let r = normal(&mut rng, &[b, e]);
        let rep = check(&[x, w, bias], EPS, None, |t, v| {
            let y = t.linear(v[0], v[1], Some(v[2]))?;
            project(t, y, &r)
        })?;
        out.push((format!("fully_connected {b}x{d}->{e}"), rep));
    }

    let pairs: [(&[usize], &[usize]); 3] = [
        (&[2, 3, 4, 1], &[2, 1, 1, 5]),
        (&[3, 4], &[3, 4]),
        (&[2, 1], &[4]),
    ];
    for (sa, sb) in pairs {
        let a = normal(&mut rng, sa);
        let b = normal(&mut rng, sb);
        let probe = {
            let t = Tape::new();
            let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
            let y = t.add(va, vb)?;
            normal(&mut rng, &t.shape(y))
        };
        let rep = check(&[a.clone(), b.clone()], EPS, None, |t, v| {
            let y = t.add(v[0], v[1])?;
            project(t, y, &probe)
        })?;
        out.push((format!("add {sa:?}+{sb:?}"), rep));
        let rep = check(&[a, b], EPS, None, |t, v| {
            let y = t.mul(v[0], v[1])?;
            project(t, y, &probe)
        })?;
        out.push((format!("mul {sa:?}*{sb:?}"), rep));
    }

    for xs in [&[2, 3][..], &[1, 4, 4, 2], &[5]] {
        let x = normal(&mut rng, &xs);
        let r = normal(&mut rng, &xs);
        let rep = check(&[x], EPS, None, |t, v| {
            let y = t.add_scalar(v[0], 1.0);
            let y = t.mul_scalar(y, -2.5);
            project(t, y, &r)
        })?;
        out.push((format!("scalar affine {xs:?}"), rep));
    }

    for xs in [&[2, 3][..], &[1, 3, 3, 2], &[7]] {
        let x = away_from_zero(&mut rng, &xs);
        let r = normal(&mut rng, &xs);
        let rep = check(&[x.clone()], EPS, None, |t, v| {
            let y = t.relu(v[0]);
            project(t, y, &r)
        })?;
        out.push((format!("relu {xs:?}"), rep));
        let x = x.map(|v| v * 4.0);
        let rep = check(&[x], EPS, None, |t, v| {
            let y = t.sigmoid(v[0]);
            project(t, y, &r)
        })?;
        out.push((format!("sigmoid {xs:?}"), rep));
    }

    for (b, q) in [(4, 6), (1, 3), (5, 2)] {
        let logits = normal(&mut rng, &[b, q]).map(|v| v * 3.0);
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..q)).collect();
        let rep = check(&[logits], EPS, None, |t, v| t.softmax_cross_entropy(v[0], &labels))?;
        out.push((format!("softmax_cross_entropy {b}x{q}"), rep));
    }

    for xs in [&[3, 4][..], &[1, 2, 2, 3], &[10]] {
        let x = normal(&mut rng, &xs);
        let r = normal(&mut rng, &xs);
        let mask_seed: u64 = rng.random();
        let rep = check(&[x], EPS, None, |t, v| {
            let mut mask_rng = ChaCha8Rng::seed_from_u64(mask_seed);
            let y = t.dropout(v[0], 0.5, true, &mut mask_rng)?;
            project(t, y, &r)
        })?;
        out.push((format!("dropout {xs:?}"), rep));
    }

    for widths in [[2usize, 3, 1], [4, 4, 4], [1, 1, 5]] {
        let inputs: Vec<Tensor<f64>> = widths.iter().map(|&w| normal(&mut rng, &[3, w])).collect();
        let r = normal(&mut rng, &[3, widths.iter().sum()]);
        let rep = check(&inputs, EPS, None, |t, v| {
            let y = t.concat(v)?;
            project(t, y, &r)
        })?;
        out.push((format!("concat {widths:?}"), rep));
    }

    for (xs, to) in [(&[2, 1, 1, 3][..], [2, 3]), (&[6], [2, 3]), (&[2, 2, 2, 2], [4, 4])] {
        let x = normal(&mut rng, &xs);
        let r = normal(&mut rng, &to);
        let rep = check(&[x], EPS, None, |t, v| {
            let y = t.reshape(v[0], &to)?;
            project(t, y, &r)
        })?;
        out.push((format!("reshape {xs:?}->{to:?}"), rep));
    }

    Ok(out)
}
