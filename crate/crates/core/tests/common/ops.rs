//! Per-op gradient checks against central finite differences.

use jepa_core::gradcheck::{central_diff, max_relative_error};
use jepa_core::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Build = fn(&mut Tape, &[Var]) -> Result<Var>;

pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    /// Inputs drawn from `[lo, hi]`.
    pub range: (f64, f64),
    pub build: Build,
}

fn case(name: &'static str, shapes: &[&[usize]], range: (f64, f64), build: Build) -> OpCase {
    OpCase {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        range,
        build,
    }
}

pub fn cases() -> Vec<OpCase> {
    vec![
        case("add", &[&[2, 3], &[2, 3]], (-2.0, 2.0), |t, v| t.add(v[0], v[1])),
        case("sub", &[&[2, 3], &[2, 3]], (-2.0, 2.0), |t, v| t.sub(v[0], v[1])),
        case("mul", &[&[2, 3], &[2, 3]], (-2.0, 2.0), |t, v| t.mul(v[0], v[1])),
        case("div", &[&[2, 3], &[2, 3]], (0.5, 2.0), |t, v| t.div(v[0], v[1])),
        case("add_bcast", &[&[2, 2, 3], &[2, 3]], (-2.0, 2.0), |t, v| t.add_bcast(v[0], v[1])),
        case("mul_bcast", &[&[2, 2, 3], &[3]], (-2.0, 2.0), |t, v| t.mul_bcast(v[0], v[1])),
        case("expand_last", &[&[3, 1]], (-2.0, 2.0), |t, v| t.expand_last(v[0], 4)),
        case("scale", &[&[4]], (-2.0, 2.0), |t, v| t.scale(v[0], -1.7)),
        case("add_scalar", &[&[4]], (-2.0, 2.0), |t, v| t.add_scalar(v[0], 0.3)),
        case("matmul", &[&[2, 2, 3], &[3, 4]], (-2.0, 2.0), |t, v| t.matmul(v[0], v[1])),
        case("bmm", &[&[2, 2, 3], &[2, 3, 2]], (-2.0, 2.0), |t, v| t.bmm(v[0], v[1])),
        case("transpose", &[&[2, 3, 4]], (-2.0, 2.0), |t, v| t.transpose(v[0])),
        case("permute", &[&[2, 3, 4]], (-2.0, 2.0), |t, v| t.permute(v[0], &[1, 2, 0])),
        case("reshape", &[&[2, 3, 4]], (-2.0, 2.0), |t, v| t.reshape(v[0], &[4, 6])),
        case("concat", &[&[2, 1, 3], &[2, 2, 3]], (-2.0, 2.0), |t, v| t.concat(&[v[0], v[1]], 1)),
        case("slice", &[&[3, 4, 2]], (-2.0, 2.0), |t, v| t.slice(v[0], 1, 1, 3)),
        case("sum_axis", &[&[2, 3, 4]], (-2.0, 2.0), |t, v| t.sum_axis(v[0], 1)),
        case("mean_axis", &[&[2, 3, 4]], (-2.0, 2.0), |t, v| t.mean_axis(v[0], 2)),
        case("sum", &[&[2, 3]], (-2.0, 2.0), |t, v| t.sum(v[0])),
        case("mean", &[&[2, 3]], (-2.0, 2.0), |t, v| t.mean(v[0])),
        case("exp", &[&[5]], (-2.0, 2.0), |t, v| t.exp(v[0])),
        case("log", &[&[5]], (0.3, 3.0), |t, v| t.log(v[0])),
        case("sqrt", &[&[5]], (0.3, 3.0), |t, v| t.sqrt(v[0])),
        case("square", &[&[5]], (-2.0, 2.0), |t, v| t.square(v[0])),
        case("relu", &[&[6]], (-2.0, 2.0), |t, v| t.relu(v[0])),
        case("gelu", &[&[6]], (-3.0, 3.0), |t, v| t.gelu(v[0])),
        case("clamp_min", &[&[6]], (-2.0, 2.0), |t, v| t.clamp_min(v[0], 0.1)),
        case("softmax", &[&[3, 5]], (-2.0, 2.0), |t, v| t.softmax(v[0], 0.7)),
        case("layer_norm", &[&[3, 6]], (-2.0, 2.0), |t, v| t.layer_norm(v[0], 1e-5)),
        case("l2_normalize", &[&[3, 4]], (-2.0, 2.0), |t, v| t.l2_normalize(v[0], 1e-12)),
        case("attention", &[&[2, 3, 4], &[2, 5, 4], &[2, 5, 4]], (-1.5, 1.5), |t, v| {
            t.scaled_dot_product_attention(v[0], v[1], v[2], None).map(|(o, _)| o)
        }),
        case("kl_to_softmax", &[&[4]], (-2.0, 2.0), |t, v| {
            // KL(p || softmax(x)) for a fixed target p.
            let p = t.constant(Tensor::new(vec![4], vec![0.1, 0.2, 0.3, 0.4])?);
            let q = t.softmax(v[0], 1.0)?;
            let lq = t.log(q)?;
            let lp = t.log(p)?;
            let d = t.sub(lp, lq)?;
            t.mul(p, d)
        }),
    ]
}

/// Returns the max relative error of autodiff against central differences
/// for `case` at `seed`, reducing the op output to a scalar through a fixed
/// random weighting so every output coordinate matters.
pub fn check_case(case: &OpCase, seed: u64, h: f64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = case.range;
    let inputs: Vec<Tensor> = case
        .shapes
        .iter()
        .map(|s| Tensor::from_fn(s, |_| rng.random_range(lo..hi)))
        .collect();

    let eval = |inputs: &[Tensor], weights: Option<&Tensor>, want_grad: bool| -> Result<(f64, Vec<Tensor>, Tensor)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.var(x.clone())).collect();
        let out = (case.build)(&mut tape, &vars)?;
        let w = match weights {
            Some(w) => w.clone(),
            None => {
                let mut wr = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
                Tensor::from_fn(tape.shape(out), |_| wr.random_range(-1.0..1.0))
            }
        };
        let wv = tape.constant(w.clone());
        let prod = tape.mul(out, wv)?;
        let loss = tape.sum(prod)?;
        let value = tape.value(loss).item();
        let grads = if want_grad {
            let g = tape.backward(loss)?;
            vars.iter()
                .zip(inputs)
                .map(|(v, x)| g.get_or_zeros(*v, x.shape()))
                .collect()
        } else {
            Vec::new()
        };
        Ok((value, grads, w))
    };

    let (_, grads, weights) = eval(&inputs, None, true)?;
    let mut worst: f64 = 0.0;
    for (which, x) in inputs.iter().enumerate() {
        let fd = central_diff(
            |xp| {
                let mut perturbed = inputs.clone();
                perturbed[which] = Tensor::new(x.shape().to_vec(), xp.to_vec()).unwrap();
                eval(&perturbed, Some(&weights), false).unwrap().0
            },
            x.data(),
            h,
        );
        worst = worst.max(max_relative_error(grads[which].data(), &fd));
    }
    Ok(worst)
}
