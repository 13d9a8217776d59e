//! Dense affine chains with a pointwise nonlinearity, optional output
//! unit-normalization, seeded initialization, and exact reverse-mode
//! gradients accumulated into a [`ParamStore`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::store::{DiffError, ParamStore};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    Tanh,
    Relu,
}

impl Nonlinearity {
    fn apply<T: Real>(self, z: T) -> T {
        match self {
            Nonlinearity::Tanh => z.tanh(),
            Nonlinearity::Relu => z.max(T::zero()),
        }
    }

    /// Derivative at pre-activation `z` given the activation `a`.
    /// relu takes the zero branch exactly at the kink.
    fn derivative<T: Real>(self, z: T, a: T) -> T {
        match self {
            Nonlinearity::Tanh => T::one() - a * a,
            Nonlinearity::Relu => {
                if z > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }
}

/// Architecture of one dense network: layer widths from input to output,
/// the hidden nonlinearity (the final layer stays affine), and whether
/// the output is unit-normalized.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_dims: Vec<usize>,
    pub nonlinearity: Nonlinearity,
    pub output_normalize: bool,
}

impl MlpSpec {
    pub fn new(layer_dims: Vec<usize>, nonlinearity: Nonlinearity, output_normalize: bool) -> Self {
        Self {
            layer_dims,
            nonlinearity,
            output_normalize,
        }
    }

    pub fn validate(&self) -> Result<(), DiffError> {
        if self.layer_dims.len() < 2 {
            return Err(DiffError::BadSpec(format!(
                "need input and output dims, got {:?}",
                self.layer_dims
            )));
        }
        if self.layer_dims.iter().any(|&d| d == 0) {
            return Err(DiffError::BadSpec("zero-width layer".to_string()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("validated nonempty")
    }

    pub fn layer_count(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn weight_name(&self, prefix: &str, layer: usize) -> String {
        format!("{prefix}.w{layer}")
    }

    pub fn bias_name(&self, prefix: &str, layer: usize) -> String {
        format!("{prefix}.b{layer}")
    }
}

/// Registers weights and biases for `spec` under `prefix`. Weights draw
/// uniformly from +-sqrt(6 / (fan_in + fan_out)); biases start at zero.
pub fn init_mlp_params<T: Real, R: Rng>(
    store: &mut ParamStore<T>,
    prefix: &str,
    spec: &MlpSpec,
    rng: &mut R,
) -> Result<(), DiffError> {
    spec.validate()?;
    for layer in 0..spec.layer_count() {
        let fan_in = spec.layer_dims[layer];
        let fan_out = spec.layer_dims[layer + 1];
        let bound = (T::lit(6.0) / T::from_usize(fan_in + fan_out).expect("dims fit")).sqrt();
        let weights: Vec<T> = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        store.register(&spec.weight_name(prefix, layer), vec![fan_out, fan_in], weights)?;
        store.register(
            &spec.bias_name(prefix, layer),
            vec![fan_out],
            vec![T::zero(); fan_out],
        )?;
    }
    Ok(())
}

/// Everything backward needs: the input, per-layer pre-activations and
/// activations, and the store version the forward pass saw.
#[derive(Debug, Clone)]
pub struct MlpCache<T> {
    version: u64,
    input: Vec<T>,
    /// Pre-activation vectors, one per layer.
    pre: Vec<Vec<T>>,
    /// Post-activation vectors, one per layer; the last entry is the raw
    /// output before any normalization.
    post: Vec<Vec<T>>,
    /// Raw output norm when normalization was applied.
    norm: Option<T>,
    output: Vec<T>,
}

impl<T: Clone> MlpCache<T> {
    pub fn output(&self) -> &[T] {
        &self.output
    }
}

const NORM_FLOOR: f64 = 1e-8;

/// `x / max(|x|, 1e-8)`; near-zero vectors are scaled linearly instead of
/// dividing by zero.
pub fn normalize<T: Real>(x: &[T]) -> (Vec<T>, T) {
    let norm = x.iter().map(|&v| v * v).sum::<T>().sqrt();
    let scale = norm.max(T::lit(NORM_FLOOR));
    (x.iter().map(|&v| v / scale).collect(), norm)
}

/// Gradient of `normalize` given the raw input, its norm, and the
/// upstream gradient with respect to the normalized output.
pub fn normalize_backward<T: Real>(x: &[T], norm: T, upstream: &[T]) -> Vec<T> {
    let floor = T::lit(NORM_FLOOR);
    if norm > floor {
        // d(x/|x|) = (g - y (g.y)) / |x| with y the normalized vector.
        let inv = T::one() / norm;
        let y: Vec<T> = x.iter().map(|&v| v * inv).collect();
        let dot: T = upstream.iter().zip(&y).map(|(&g, &yi)| g * yi).sum();
        upstream
            .iter()
            .zip(&y)
            .map(|(&g, &yi)| (g - yi * dot) * inv)
            .collect()
    } else {
        // Below the floor the map is x/floor, plain linear scaling.
        upstream.iter().map(|&g| g / floor).collect()
    }
}

/// Runs the network and caches activations for backward.
pub fn mlp_forward<T: Real>(
    spec: &MlpSpec,
    store: &ParamStore<T>,
    prefix: &str,
    input: &[T],
) -> Result<MlpCache<T>, DiffError> {
    spec.validate()?;
    if input.len() != spec.input_dim() {
        return Err(DiffError::DimensionMismatch {
            expected: spec.input_dim(),
            got: input.len(),
        });
    }
    let layers = spec.layer_count();
    let mut pre = Vec::with_capacity(layers);
    let mut post = Vec::with_capacity(layers);
    let mut activation = input.to_vec();

    for layer in 0..layers {
        let w = store.value(&spec.weight_name(prefix, layer))?;
        let b = store.value(&spec.bias_name(prefix, layer))?;
        let fan_in = spec.layer_dims[layer];
        let fan_out = spec.layer_dims[layer + 1];
        let mut z = vec![T::zero(); fan_out];
        for o in 0..fan_out {
            let row = &w[o * fan_in..(o + 1) * fan_in];
            let mut acc = b[o];
            for (wi, ai) in row.iter().zip(&activation) {
                acc += *wi * *ai;
            }
            z[o] = acc;
        }
        let a: Vec<T> = if layer + 1 == layers {
            z.clone()
        } else {
            z.iter().map(|&v| spec.nonlinearity.apply(v)).collect()
        };
        pre.push(z);
        post.push(a.clone());
        activation = a;
    }

    let (output, norm) = if spec.output_normalize {
        let (normed, norm) = normalize(&activation);
        (normed, Some(norm))
    } else {
        (activation, None)
    };

    Ok(MlpCache {
        version: store.version(),
        input: input.to_vec(),
        pre,
        post,
        norm,
        output,
    })
}

/// Accumulates parameter gradients (`+=`) for one forward pass and
/// returns the gradient with respect to the input. Rejects caches built
/// against an older parameter version.
pub fn mlp_backward<T: Real>(
    spec: &MlpSpec,
    store: &mut ParamStore<T>,
    prefix: &str,
    cache: &MlpCache<T>,
    upstream: &[T],
) -> Result<Vec<T>, DiffError> {
    if cache.version != store.version() {
        return Err(DiffError::StaleCache);
    }
    if upstream.len() != spec.output_dim() {
        return Err(DiffError::DimensionMismatch {
            expected: spec.output_dim(),
            got: upstream.len(),
        });
    }
    let layers = spec.layer_count();

    let mut g: Vec<T> = match (&cache.norm, spec.output_normalize) {
        (Some(norm), true) => normalize_backward(&cache.post[layers - 1], *norm, upstream),
        (None, false) => upstream.to_vec(),
        _ => {
            return Err(DiffError::BadSpec(
                "forward cache was built under a different output_normalize setting".to_string(),
            ))
        }
    };

    for layer in (0..layers).rev() {
        let fan_in = spec.layer_dims[layer];
        let fan_out = spec.layer_dims[layer + 1];
        // g currently holds dL/da for this layer; fold in the activation
        // derivative to get dL/dz (the final layer is affine).
        if layer + 1 != layers {
            for o in 0..fan_out {
                g[o] *= spec
                    .nonlinearity
                    .derivative(cache.pre[layer][o], cache.post[layer][o]);
            }
        }
        let below: &[T] = if layer == 0 {
            &cache.input
        } else {
            &cache.post[layer - 1]
        };

        let mut w_grad = vec![T::zero(); fan_out * fan_in];
        for o in 0..fan_out {
            for i in 0..fan_in {
                w_grad[o * fan_in + i] = g[o] * below[i];
            }
        }
        store.accumulate_grad(&spec.weight_name(prefix, layer), &w_grad)?;
        store.accumulate_grad(&spec.bias_name(prefix, layer), &g)?;

        let w = store.value(&spec.weight_name(prefix, layer))?;
        let mut g_below = vec![T::zero(); fan_in];
        for o in 0..fan_out {
            let row = &w[o * fan_in..(o + 1) * fan_in];
            for i in 0..fan_in {
                g_below[i] += row[i] * g[o];
            }
        }
        g = g_below;
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(dims: Vec<usize>, nl: Nonlinearity, norm: bool) -> MlpSpec {
        MlpSpec::new(dims, nl, norm)
    }

    #[test]
    fn identity_single_layer_passes_input_through() {
        let s = spec(vec![3, 3], Nonlinearity::Tanh, false);
        let mut store = ParamStore::new();
        let eye = vec![
            1.0, 0.0, 0.0, //
            0.0, 1.0, 0.0, //
            0.0, 0.0, 1.0,
        ];
        store.register("m.w0", vec![3, 3], eye).unwrap();
        store.register("m.b0", vec![3], vec![0.0; 3]).unwrap();
        let cache = mlp_forward(&s, &store, "m", &[0.3, -0.7, 2.0]).unwrap();
        assert_eq!(cache.output(), &[0.3, -0.7, 2.0]);
    }

    #[test]
    fn zero_params_give_zero_output() {
        let s = spec(vec![2, 4, 3], Nonlinearity::Relu, false);
        let mut store = ParamStore::new();
        store.register("m.w0", vec![4, 2], vec![0.0; 8]).unwrap();
        store.register("m.b0", vec![4], vec![0.0; 4]).unwrap();
        store.register("m.w1", vec![3, 4], vec![0.0; 12]).unwrap();
        store.register("m.b1", vec![3], vec![0.0; 3]).unwrap();
        let cache = mlp_forward(&s, &store, "m", &[1.0, -1.0]).unwrap();
        assert_eq!(cache.output(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn forward_matches_hand_rolled_arithmetic() {
        let s = spec(vec![2, 2, 1], Nonlinearity::Tanh, false);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        init_mlp_params(&mut store, "m", &s, &mut rng).unwrap();
        let input = [0.4f64, -0.9];
        let cache = mlp_forward(&s, &store, "m", &input).unwrap();

        let w0 = store.value("m.w0").unwrap();
        let b0 = store.value("m.b0").unwrap();
        let w1 = store.value("m.w1").unwrap();
        let b1 = store.value("m.b1").unwrap();
        let h0 = (w0[0] * input[0] + w0[1] * input[1] + b0[0]).tanh();
        let h1 = (w0[2] * input[0] + w0[3] * input[1] + b0[1]).tanh();
        let out = w1[0] * h0 + w1[1] * h1 + b1[0];
        assert_relative_eq!(cache.output()[0], out, max_relative = 1e-12);
    }

    #[test]
    fn init_respects_the_xavier_bound() {
        let s = spec(vec![10, 6], Nonlinearity::Tanh, false);
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        init_mlp_params(&mut store, "m", &s, &mut rng).unwrap();
        let bound = (6.0f64 / 16.0).sqrt();
        let w = store.value("m.w0").unwrap();
        assert!(w.iter().all(|v| v.abs() <= bound));
        assert!(w.iter().any(|v| v.abs() > bound * 0.1));
        assert!(store.value("m.b0").unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalized_output_has_unit_length() {
        let s = spec(vec![2, 3], Nonlinearity::Tanh, true);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        init_mlp_params(&mut store, "m", &s, &mut rng).unwrap();
        let cache = mlp_forward(&s, &store, "m", &[1.0, 2.0]).unwrap();
        let norm: f64 = cache.output().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert_relative_eq!(norm, 1.0, max_relative = 1e-12);
    }

    #[test]
    fn backward_rejects_stale_caches() {
        let s = spec(vec![2, 2], Nonlinearity::Tanh, false);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        init_mlp_params(&mut store, "m", &s, &mut rng).unwrap();
        let cache = mlp_forward(&s, &store, "m", &[1.0, 1.0]).unwrap();
        store.set_coord("m.b0", 0, 0.5).unwrap();
        assert_eq!(
            mlp_backward(&s, &mut store, "m", &cache, &[1.0, 1.0]).unwrap_err(),
            DiffError::StaleCache
        );
    }

    #[test]
    fn zero_upstream_accumulates_nothing() {
        let s = spec(vec![2, 3, 2], Nonlinearity::Tanh, false);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        init_mlp_params(&mut store, "m", &s, &mut rng).unwrap();
        let cache = mlp_forward(&s, &store, "m", &[0.2, 0.8]).unwrap();
        mlp_backward(&s, &mut store, "m", &cache, &[0.0, 0.0]).unwrap();
        for name in ["m.w0", "m.b0", "m.w1", "m.b1"] {
            assert!(store.grad(name).unwrap().iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn two_backward_passes_accumulate_twice_one() {
        let s = spec(vec![2, 3, 2], Nonlinearity::Tanh, true);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        init_mlp_params(&mut store, "m", &s, &mut rng).unwrap();
        let cache = mlp_forward(&s, &store, "m", &[0.2, 0.8]).unwrap();
        let up = [0.7, -0.3];
        mlp_backward(&s, &mut store, "m", &cache, &up).unwrap();
        let once: Vec<f64> = store.grad("m.w0").unwrap().to_vec();
        mlp_backward(&s, &mut store, "m", &cache, &up).unwrap();
        let twice = store.grad("m.w0").unwrap();
        for (a, b) in once.iter().zip(twice) {
            assert_relative_eq!(2.0 * a, *b, max_relative = 1e-14);
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let s = spec(vec![3, 4, 2], Nonlinearity::Tanh, true);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        init_mlp_params(&mut store, "m", &s, &mut rng).unwrap();
        let input = [0.3, -0.5, 0.9];
        let up = [1.0, -2.0];
        let cache = mlp_forward(&s, &store, "m", &input).unwrap();
        let d_input = mlp_backward(&s, &mut store, "m", &cache, &up).unwrap();

        let loss = |x: &[f64]| {
            let c = mlp_forward(&s, &store, "m", x).unwrap();
            c.output().iter().zip(&up).map(|(o, u)| o * u).sum::<f64>()
        };
        let h = 1e-6;
        for i in 0..3 {
            let mut plus = input;
            plus[i] += h;
            let mut minus = input;
            minus[i] -= h;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
            assert_relative_eq!(d_input[i], numeric, max_relative = 1e-6);
        }
    }

    #[test]
    fn normalize_handles_near_zero_vectors() {
        let (y, norm) = normalize(&[0.0f64, 0.0]);
        assert_eq!(norm, 0.0);
        assert_eq!(y, vec![0.0, 0.0]);
        let g = normalize_backward(&[0.0f64, 0.0], 0.0, &[1.0, 1.0]);
        assert_eq!(g, vec![1e8, 1e8]);
    }

    #[test]
    fn spec_validation_rejects_degenerate_shapes() {
        assert!(spec(vec![3], Nonlinearity::Tanh, false).validate().is_err());
        assert!(spec(vec![3, 0, 2], Nonlinearity::Relu, false)
            .validate()
            .is_err());
        assert!(spec(vec![3, 2], Nonlinearity::Relu, true).validate().is_ok());
    }
}
