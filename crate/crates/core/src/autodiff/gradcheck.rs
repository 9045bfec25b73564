//! Central-difference verification of analytic gradients.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Fault, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Relative error used throughout: `|a - n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1.0f64.max(analytic.abs()).max(numeric.abs())
}

/// Per-coordinate relative errors between `analytic` and central differences
/// of `f` around `x`.
pub fn finite_diff_errors<F>(
    mut f: F,
    x: &[f64],
    analytic: &[f64],
    coords: &[usize],
    eps: f64,
) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::contract(format!("eps must lie in (0, 1e-2], got {eps}")));
    }
    if analytic.len() != x.len() {
        return Err(Error::contract("analytic gradient length differs from parameter length"));
    }
    let base_a = f(x)?;
    let base_b = f(x)?;
    if base_a.to_bits() != base_b.to_bits() {
        return Err(Error::contract(format!(
            "function is not deterministic: {base_a} vs {base_b}"
        )));
    }
    let mut probe = x.to_vec();
    let mut errors = Vec::with_capacity(coords.len());
    for &c in coords {
        if c >= x.len() {
            return Err(Error::contract(format!("coordinate {c} out of range")));
        }
        let orig = probe[c];
        probe[c] = orig + eps;
        let plus = f(&probe)?;
        probe[c] = orig - eps;
        let minus = f(&probe)?;
        probe[c] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        errors.push(relative_error(analytic[c], numeric));
    }
    Ok(errors)
}

/// Maximum relative error over `coords`.
pub fn finite_diff_check<F>(f: F, x: &[f64], analytic: &[f64], coords: &[usize], eps: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let errors = finite_diff_errors(f, x, analytic, coords, eps)?;
    Ok(errors.into_iter().fold(0.0, f64::max))
}

type BuildFn = fn(&mut Graph, &[Var]) -> crate::Result<Var>;

/// A differentiable primitive wired up for checking.
pub struct PrimitiveCase {
    pub name: &'static str,
    pub input_shapes: Vec<Vec<usize>>,
    build: BuildFn,
}

#[derive(Clone, Debug)]
pub struct PrimitiveResult {
    pub name: &'static str,
    pub max_rel_error: f64,
}

/// Every differentiable primitive the network uses.
pub fn primitive_cases() -> Vec<PrimitiveCase> {
    fn case(name: &'static str, input_shapes: Vec<Vec<usize>>, build: BuildFn) -> PrimitiveCase {
        PrimitiveCase {
            name,
            input_shapes,
            build,
        }
    }
    vec![
        case("matmul", vec![vec![3, 4], vec![4, 2]], |g, v| g.matmul(v[0], v[1])),
        case("matmul_nt", vec![vec![3, 4], vec![5, 4]], |g, v| g.matmul_nt(v[0], v[1])),
        case("transpose", vec![vec![3, 2]], |g, v| g.transpose(v[0])),
        case("add", vec![vec![2, 3], vec![2, 3]], |g, v| g.add(v[0], v[1])),
        case("add_row", vec![vec![3, 4], vec![1, 4]], |g, v| g.add_row(v[0], v[1])),
        case("mul", vec![vec![2, 3], vec![2, 3]], |g, v| g.mul(v[0], v[1])),
        case("scale", vec![vec![2, 3]], |g, v| Ok(g.scale(v[0], -1.7))),
        case("gelu", vec![vec![3, 3]], |g, v| Ok(g.gelu(v[0]))),
        case("relu", vec![vec![3, 3]], |g, v| Ok(g.relu(v[0]))),
        case("layer_norm", vec![vec![3, 5], vec![5], vec![5]], |g, v| {
            g.layer_norm(v[0], v[1], v[2])
        }),
        case("softmax_rows", vec![vec![3, 4]], |g, v| g.softmax_rows(v[0])),
        case(
            "scaled_dot_attention",
            vec![vec![2, 4], vec![3, 4], vec![3, 5]],
            |g, v| g.scaled_dot_attention(v[0], v[1], v[2]),
        ),
        case("concat_rows", vec![vec![2, 3], vec![1, 3]], |g, v| g.concat_rows(&[v[0], v[1]])),
        case("slice_rows", vec![vec![4, 3]], |g, v| g.slice_rows(v[0], 1, 2)),
        case("concat_cols", vec![vec![2, 3], vec![2, 2]], |g, v| g.concat_cols(&[v[0], v[1]])),
        case("slice_cols", vec![vec![3, 5]], |g, v| g.slice_cols(v[0], 2, 2)),
        case("mean_rows", vec![vec![4, 3]], |g, v| g.mean_rows(v[0])),
        case("sum", vec![vec![2, 3]], |g, v| Ok(g.sum(v[0]))),
        case("reshape", vec![vec![2, 3]], |g, v| g.reshape(v[0], &[3, 2])),
        case("gather_rows", vec![vec![4, 3]], |g, v| g.gather_rows(v[0], &[2, 0, 2])),
        case("cross_entropy", vec![vec![6]], |g, v| g.cross_entropy(v[0], 4)),
    ]
}

fn weighted_loss(g: &mut Graph, out: Var, weights: &Tensor) -> Result<Var> {
    let w = g.constant(weights.clone());
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

/// Checks one primitive: loss is `Σ w ∘ op(inputs)` with fixed random `w`,
/// inputs drawn uniformly from [-1, 1], every input coordinate probed.
pub fn check_primitive(case: &PrimitiveCase, fault: Option<Fault>, eps: f64, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor> = case
        .input_shapes
        .iter()
        .map(|s| {
            let n = s.iter().product();
            Tensor::new(s.clone(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        })
        .collect::<Result<_>>()?;

    let out_shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = (case.build)(&mut g, &vars)?;
        g.shape(out).to_vec()
    };
    let n_out: usize = out_shape.iter().product();
    let weights = Tensor::new(out_shape, (0..n_out).map(|_| rng.random_range(-1.0..1.0)).collect())?;

    let mut g = match fault {
        Some(f) => Graph::with_fault(f),
        None => Graph::new(),
    };
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = (case.build)(&mut g, &vars)?;
    let loss = weighted_loss(&mut g, out, &weights)?;
    g.backward(loss)?;
    let mut analytic = Vec::new();
    for (v, t) in vars.iter().zip(&inputs) {
        match g.grad(*v) {
            Some(gr) => analytic.extend_from_slice(gr.data()),
            None => analytic.extend(std::iter::repeat_n(0.0, t.numel())),
        }
    }

    let x: Vec<f64> = inputs.iter().flat_map(|t| t.data().iter().copied()).collect();
    let shapes = case.input_shapes.clone();
    let eval = |flat: &[f64]| -> Result<f64> {
        let mut g = Graph::new();
        let mut offset = 0;
        let mut vars = Vec::with_capacity(shapes.len());
        for s in &shapes {
            let n: usize = s.iter().product();
            vars.push(g.constant(Tensor::new(s.clone(), flat[offset..offset + n].to_vec())?));
            offset += n;
        }
        let out = (case.build)(&mut g, &vars)?;
        let loss = weighted_loss(&mut g, out, &weights)?;
        Ok(g.value(loss).data()[0])
    };
    let coords: Vec<usize> = (0..x.len()).collect();
    finite_diff_check(eval, &x, &analytic, &coords, eps)
}

/// Runs [`check_primitive`] over [`primitive_cases`].
pub fn primitive_suite(fault: Option<Fault>, eps: f64, seed: u64) -> Result<Vec<PrimitiveResult>> {
    primitive_cases()
        .iter()
        .enumerate()
        .map(|(i, case)| {
            Ok(PrimitiveResult {
                name: case.name,
                max_rel_error: check_primitive(case, fault, eps, seed.wrapping_add(i as u64))?,
            })
        })
        .collect()
}
