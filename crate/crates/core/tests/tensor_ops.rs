//! Every differentiable op against central differences, softmax
//! normalization over random shapes and masks, and gradient additivity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stance_inject::encoder::{check_gradients, Graph, ModelError};
use stance_inject::tensor::{GradCheckOptions, Mask, ParamId, ParamStore, Tape, Tensor, Var};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const TOL: f64 = 1e-5;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.5..1.5)).collect(),
    )
    .unwrap()
}

/// `sum(y ⊙ w)` for a fixed random `w`, so that no output direction is
/// invisible to the loss.
fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var, ModelError> {
    let shape = g.tape.shape(y).to_vec();
    let w = g.tape.constant(random(
        &shape,
        &mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed),
    ))?;
    let prod = g.tape.mul(y, w)?;
    Ok(g.tape.sum(prod)?)
}

/// Checks `op` on parameters of the given shapes for every seed.
fn check_op(
    name: &str,
    shapes: &[&[usize]],
    op: impl Fn(&mut Graph, &[Var], &mut ChaCha8Rng) -> Result<Var, ModelError>,
) {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let ids: Vec<ParamId> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                store
                    .insert(format!("{name}.{i}"), random(s, &mut rng))
                    .unwrap()
            })
            .collect();
        let report = check_gradients(
            &mut store,
            |g| {
                let vars = ids
                    .iter()
                    .map(|&id| g.param(id))
                    .collect::<Result<Vec<_>, _>>()?;
                // op-specific constants are drawn from a fresh stream on every evaluation
                let mut op_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(100));
                let y = op(g, &vars, &mut op_rng)?;
                if g.tape.shape(y).is_empty() {
                    Ok(y)
                } else {
                    weighted_sum(g, y, seed)
                }
            },
            GradCheckOptions {
                tol: TOL,
                ..GradCheckOptions::default()
            },
        )
        .unwrap();
        assert!(
            report.passed,
            "{name} seed {seed}: {:#?}",
            report.failing().collect::<Vec<_>>()
        );
    }
}

fn random_mask(shape: &[usize], rng: &mut ChaCha8Rng) -> Mask {
    let n = shape.iter().product();
    Mask::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_bool(0.7)).collect(),
    )
    .unwrap()
}

#[test]
fn elementwise_ops() {
    check_op("add", &[&[3, 4], &[3, 4]], |g, v, _| {
        Ok(g.tape.add(v[0], v[1])?)
    });
    check_op("mul", &[&[2, 5], &[2, 5]], |g, v, _| {
        Ok(g.tape.mul(v[0], v[1])?)
    });
    check_op("add_bias", &[&[2, 3, 4], &[4]], |g, v, _| {
        Ok(g.tape.add_bias(v[0], v[1])?)
    });
    check_op("scale", &[&[6]], |g, v, _| Ok(g.tape.scale(v[0], -0.37)?));
    check_op("gelu", &[&[3, 7]], |g, v, _| Ok(g.tape.gelu(v[0])?));
    check_op("tanh", &[&[3, 7]], |g, v, _| Ok(g.tape.tanh(v[0])?));
}

#[test]
fn matmul_shared_and_batched() {
    check_op("matmul2d", &[&[4, 5], &[5, 3]], |g, v, _| {
        Ok(g.tape.matmul(v[0], v[1])?)
    });
    check_op("matmul_shared", &[&[2, 3, 4], &[4, 5]], |g, v, _| {
        Ok(g.tape.matmul(v[0], v[1])?)
    });
    check_op(
        "matmul_batched",
        &[&[2, 2, 3, 4], &[2, 2, 4, 3]],
        |g, v, _| Ok(g.tape.matmul(v[0], v[1])?),
    );
}

#[test]
fn shape_ops() {
    check_op("reshape", &[&[2, 6]], |g, v, _| {
        Ok(g.tape.reshape(v[0], &[3, 4])?)
    });
    check_op("permute", &[&[2, 3, 4]], |g, v, _| {
        Ok(g.tape.permute(v[0], &[2, 0, 1])?)
    });
    check_op("gather_rows", &[&[4, 3]], |g, v, _| {
        Ok(g.tape.gather_rows(v[0], &[2, 0, 2, 3])?)
    });
    check_op("group_mean", &[&[6, 2, 3]], |g, v, _| {
        Ok(g.tape.group_mean(v[0], 3)?)
    });
    check_op("select_position", &[&[2, 4, 3]], |g, v, _| {
        Ok(g.tape.select_position(v[0], 2)?)
    });
    check_op("embedding", &[&[5, 3]], |g, v, _| {
        Ok(g.tape.embedding(v[0], &[4, 0, 4, 1, 2, 2], &[2, 3])?)
    });
    check_op("sum", &[&[3, 3]], |g, v, _| Ok(g.tape.sum(v[0])?));
}

#[test]
fn softmax_layer_norm_cross_entropy() {
    check_op("softmax", &[&[2, 3, 5]], |g, v, _| {
        Ok(g.tape.softmax_lastdim(v[0], None)?)
    });
    check_op("softmax_masked", &[&[2, 2, 3, 4]], |g, v, rng| {
        let mask = random_mask(&[2, 1, 1, 4], rng);
        Ok(g.tape.softmax_lastdim(v[0], Some(&mask))?)
    });
    check_op("layer_norm", &[&[3, 6], &[6], &[6]], |g, v, _| {
        Ok(g.tape.layer_norm(v[0], v[1], v[2], 1e-12)?)
    });
    check_op("cross_entropy", &[&[4, 3]], |g, v, rng| {
        let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
        Ok(g.tape.cross_entropy(v[0], &labels)?)
    });
}

#[test]
fn softmax_rows_sum_to_one_up_to_rank_four() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let rank = rng.random_range(1..=4);
        let shape: Vec<usize> = (0..rank).map(|_| rng.random_range(1..5)).collect();
        let x = Tensor::new(
            shape.clone(),
            (0..shape.iter().product())
                .map(|_| rng.random_range(-30.0..30.0))
                .collect(),
        )
        .unwrap();
        let masked = rng.random_bool(0.5);
        let mask = masked.then(|| random_mask(&shape, &mut rng));
        let mut tape = Tape::new();
        let xv = tape.constant(x).unwrap();
        let y = tape.softmax_lastdim(xv, mask.as_ref()).unwrap();
        let last = *shape.last().unwrap();
        let out = tape.value(y).data();
        for (r, row) in out.chunks(last).enumerate() {
            let keep: Vec<bool> = match &mask {
                Some(m) => m.keep()[r * last..(r + 1) * last].to_vec(),
                None => vec![true; last],
            };
            let total: f64 = row.iter().sum();
            if keep.iter().any(|&k| k) {
                assert!((total - 1.0).abs() <= 1e-9, "{shape:?} row {r}: {total}");
            } else {
                assert_eq!(total, 0.0, "all-masked row is zero");
            }
            for (v, k) in row.iter().zip(&keep) {
                assert!(*k || *v == 0.0, "masked position carries mass");
            }
        }
    }
}

#[test]
fn gradient_additivity_is_exact() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let w = store.insert("w", random(&[4, 3], &mut rng)).unwrap();
        let b = store.insert("b", random(&[3], &mut rng)).unwrap();
        let x1 = random(&[2, 4], &mut rng);
        let x2 = random(&[5, 4], &mut rng);
        let labels: Vec<usize> = (0..5).map(|_| rng.random_range(0..3)).collect();

        let loss_a = |g: &mut Graph| -> Var {
            let wv = g.param(w).unwrap();
            let x = g.tape.constant(x1.clone()).unwrap();
            let h = g.tape.matmul(x, wv).unwrap();
            let h = g.tape.tanh(h).unwrap();
            g.tape.sum(h).unwrap()
        };
        let loss_b = |g: &mut Graph| -> Var {
            let (wv, bv) = (g.param(w).unwrap(), g.param(b).unwrap());
            let x = g.tape.constant(x2.clone()).unwrap();
            let h = g.tape.matmul(x, wv).unwrap();
            let h = g.tape.add_bias(h, bv).unwrap();
            g.tape.cross_entropy(h, &labels).unwrap()
        };
        let grads = |build: &dyn Fn(&mut Graph) -> Var| {
            let mut g = Graph::eval(&store);
            let l = build(&mut g);
            g.tape.backward(l).unwrap();
            let mut out = vec![vec![0.0; 12], vec![0.0; 3]];
            for (id, grad) in g.param_grads() {
                out[usize::from(id == b)] = grad;
            }
            out
        };
        let a = grads(&loss_a);
        let bb = grads(&loss_b);
        let both = grads(&|g: &mut Graph| {
            let la = loss_a(g);
            let lb = loss_b(g);
            g.tape.add(la, lb).unwrap()
        });
        for p in 0..2 {
            let separate: Vec<f64> = a[p].iter().zip(&bb[p]).map(|(x, y)| x + y).collect();
            assert_eq!(both[p], separate, "seed {seed} param {p}");
        }
    }
}
