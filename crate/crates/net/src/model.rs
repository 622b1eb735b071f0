//! Forward and backward passes of the full network.
//!
//! embed: kernel-1 linear 4 -> C per token.
//! body: `y = e + RSTB_n(... RSTB_1(e))`, `RSTB(x) = x + Linear(ST_k(... ST_1(x)))`,
//! with ST layers alternating plain and shifted windows.
//! head: padded tokens zeroed, width-3 conv, mean over valid tokens, linear to
//! `feature_dim`.
//! generator: `[F, 1, 1]` map, transposed convs (4x then 2x steps) each
//! followed by LeakyReLU, then a 3x3 conv down to one channel.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use ccir_core::rng::stream_rng;
use ccir_core::{AngularImage, EventList, Grid};

use crate::attention::{attention_bwd, attention_fwd, AttnCache, AttnGrads, AttnParams, AttnShape};
use crate::config::NetworkConfig;
use crate::input::{prepare_input, PreparedInput};
use crate::ops::{
    conv1d3_bwd, conv1d3_fwd, conv3x3_bwd, conv3x3_fwd, gelu, gelu_grad, layernorm_bwd, layernorm_fwd, leaky,
    leaky_grad, linear_bwd, linear_fwd, ConvT, LnCache,
};
use crate::params::{decode_weights, encode_weights, Params, WeightsError};
use crate::scalar::Scalar;

const TRUNC_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("network config: {field}: {message}")]
    Config { field: &'static str, message: String },
    #[error("parameter {name}: {message}")]
    Param { name: String, message: String },
    #[error("no events to image")]
    EmptyInput,
    #[error(transparent)]
    Weights(#[from] WeightsError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Trunc,
    /// Normal with std `sqrt(2 / fan_in)`.
    He(usize),
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
struct TensorSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

#[derive(Debug, Clone, Copy)]
pub struct StIdx {
    pub norm1_g: usize,
    pub norm1_b: usize,
    pub qkv_w: usize,
    pub qkv_b: usize,
    pub proj_w: usize,
    pub proj_b: usize,
    pub rel_bias: usize,
    pub norm2_g: usize,
    pub norm2_b: usize,
    pub fc1_w: usize,
    pub fc1_b: usize,
    pub fc2_w: usize,
    pub fc2_b: usize,
}

#[derive(Debug, Clone)]
pub struct RstbIdx {
    pub layers: Vec<StIdx>,
    pub lin_w: usize,
    pub lin_b: usize,
}

/// Positions of every tensor in the parameter store.
#[derive(Debug, Clone)]
pub struct Layout {
    pub embed_w: usize,
    pub embed_b: usize,
    pub rstb: Vec<RstbIdx>,
    pub conv_w: usize,
    pub conv_b: usize,
    pub fc_w: usize,
    pub fc_b: usize,
    pub up: Vec<(usize, usize)>,
    pub out_w: usize,
    pub out_b: usize,
    specs: Vec<TensorSpec>,
}

impl Layout {
    pub fn new(cfg: &NetworkConfig) -> Self {
        let mut specs = Vec::new();
        let mut add = |name: String, shape: Vec<usize>, init: Init| {
            specs.push(TensorSpec { name, shape, init });
            specs.len() - 1
        };
        let c = cfg.embed_dim;
        let hid = c * cfg.mlp_ratio;
        let embed_w = add("embed.weight".into(), vec![c, 4], Init::Trunc);
        let embed_b = add("embed.bias".into(), vec![c], Init::Zeros);
        let mut rstb = Vec::new();
        for r in 0..cfg.n_rstb {
            let mut layers = Vec::new();
            for s in 0..cfg.st_per_rstb {
                let p = format!("rstb{r}.st{s}");
                layers.push(StIdx {
                    norm1_g: add(format!("{p}.norm1.weight"), vec![c], Init::Ones),
                    norm1_b: add(format!("{p}.norm1.bias"), vec![c], Init::Zeros),
                    qkv_w: add(format!("{p}.attn.qkv.weight"), vec![3 * c, c], Init::Trunc),
                    qkv_b: add(format!("{p}.attn.qkv.bias"), vec![3 * c], Init::Zeros),
                    proj_w: add(format!("{p}.attn.proj.weight"), vec![c, c], Init::Trunc),
                    proj_b: add(format!("{p}.attn.proj.bias"), vec![c], Init::Zeros),
                    rel_bias: add(format!("{p}.attn.rel_bias"), vec![cfg.heads, 2 * cfg.window - 1], Init::Zeros),
                    norm2_g: add(format!("{p}.norm2.weight"), vec![c], Init::Ones),
                    norm2_b: add(format!("{p}.norm2.bias"), vec![c], Init::Zeros),
                    fc1_w: add(format!("{p}.mlp.fc1.weight"), vec![hid, c], Init::Trunc),
                    fc1_b: add(format!("{p}.mlp.fc1.bias"), vec![hid], Init::Zeros),
                    fc2_w: add(format!("{p}.mlp.fc2.weight"), vec![c, hid], Init::Trunc),
                    fc2_b: add(format!("{p}.mlp.fc2.bias"), vec![c], Init::Zeros),
                });
            }
            rstb.push(RstbIdx {
                layers,
                lin_w: add(format!("rstb{r}.linear.weight"), vec![c, c], Init::Trunc),
                lin_b: add(format!("rstb{r}.linear.bias"), vec![c], Init::Zeros),
            });
        }
        let conv_w = add("dfe.conv.weight".into(), vec![c, c, 3], Init::He(3 * c));
        let conv_b = add("dfe.conv.bias".into(), vec![c], Init::Zeros);
        let f = cfg.feature_dim;
        let fc_w = add("dfe.fc.weight".into(), vec![f, c], Init::Trunc);
        let fc_b = add("dfe.fc.bias".into(), vec![f], Init::Zeros);
        let mut up = Vec::new();
        let mut cin = f;
        for (k, &cout) in cfg.ig_channels().iter().enumerate() {
            // each output pixel of a stride-s, kernel-4 step receives (4/s)^2 taps per input channel
            let taps = if k == 0 { 1 } else { 4 };
            up.push((
                add(format!("ig.up{}.weight", k + 1), vec![cin, cout, 4, 4], Init::He(cin * taps)),
                add(format!("ig.up{}.bias", k + 1), vec![cout], Init::Zeros),
            ));
            cin = cout;
        }
        let out_w = add("ig.out.weight".into(), vec![1, cin, 3, 3], Init::He(9 * cin));
        let out_b = add("ig.out.bias".into(), vec![1], Init::Zeros);
        Self {
            embed_w,
            embed_b,
            rstb,
            conv_w,
            conv_b,
            fc_w,
            fc_b,
            up,
            out_w,
            out_b,
            specs,
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.specs.iter().map(|s| s.name.as_str())
    }
}

fn check_config(cfg: &NetworkConfig) -> Result<(), NetError> {
    match cfg.validate().into_iter().next() {
        Some((field, message)) => Err(NetError::Config { field, message }),
        None => Ok(()),
    }
}

/// Mutable views of two distinct tensors.
fn pair_mut<T: Scalar>(p: &mut Params<T>, a: usize, b: usize) -> (&mut [T], &mut [T]) {
    let [x, y] = p.tensors.get_disjoint_mut([a, b]).expect("distinct tensors");
    (&mut x.data, &mut y.data)
}

#[derive(Debug, Clone, Default)]
struct StCache<T> {
    ln1: LnCache<T>,
    a: Vec<T>,
    attn: AttnCache<T>,
    ln2: LnCache<T>,
    b: Vec<T>,
    h: Vec<T>,
    g: Vec<T>,
}

#[derive(Debug, Clone, Default)]
struct RstbCache<T> {
    layers: Vec<StCache<T>>,
    /// Output of the last ST layer, input of the trailing linear.
    s: Vec<T>,
}

#[derive(Debug, Clone, Default)]
struct IgCache<T> {
    /// Pre-activation of each upsampling step.
    pre: Vec<Vec<T>>,
    /// Post-activation of each step.
    act: Vec<Vec<T>>,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardCache<T> {
    valid: usize,
    x0: Vec<T>,
    rstb: Vec<RstbCache<T>>,
    masked: Vec<T>,
    pooled: Vec<T>,
    feature: Vec<T>,
    ig: IgCache<T>,
}

impl<T: Scalar> ForwardCache<T> {
    pub fn feature(&self) -> &[T] {
        &self.feature
    }

    /// Sign pattern of every LeakyReLU input; a change marks a kink crossing.
    pub fn activation_signs(&self) -> Vec<bool> {
        self.ig.pre.iter().flatten().map(|&v| v > T::zero()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Network<T> {
    pub cfg: NetworkConfig,
    pub layout: Layout,
    pub params: Params<T>,
}

impl<T: Scalar> Network<T> {
    /// Freshly initialized weights.
    pub fn init(cfg: &NetworkConfig, seed: u64) -> Result<Self, NetError> {
        check_config(cfg)?;
        let layout = Layout::new(cfg);
        let mut params = Params::default();
        for (i, spec) in layout.specs.iter().enumerate() {
            let n: usize = spec.shape.iter().product();
            let mut rng = stream_rng(seed, i as u64);
            let data = match spec.init {
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
                Init::Trunc => (0..n).map(|_| T::of(TRUNC_STD * trunc_normal(&mut rng))).collect(),
                Init::He(fan_in) => {
                    let std = (2.0 / fan_in as f64).sqrt();
                    (0..n)
                        .map(|_| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            T::of(std * z)
                        })
                        .collect()
                }
            };
            params.push(spec.name.clone(), spec.shape.clone(), data);
        }
        Ok(Self {
            cfg: cfg.clone(),
            layout,
            params,
        })
    }

    /// Wraps existing tensors after checking names and shapes against `cfg`.
    pub fn from_params(cfg: &NetworkConfig, params: Params<T>) -> Result<Self, NetError> {
        check_config(cfg)?;
        let layout = Layout::new(cfg);
        if params.tensors.len() != layout.specs.len() {
            return Err(NetError::Param {
                name: "*".into(),
                message: format!("{} tensors, config needs {}", params.tensors.len(), layout.specs.len()),
            });
        }
        for (t, s) in params.tensors.iter().zip(&layout.specs) {
            if t.name != s.name || t.shape != s.shape {
                return Err(NetError::Param {
                    name: t.name.clone(),
                    message: format!("found {:?} {:?}, expected {} {:?}", t.name, t.shape, s.name, s.shape),
                });
            }
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(NetError::Param {
                    name: t.name.clone(),
                    message: "non-finite value".into(),
                });
            }
        }
        Ok(Self {
            cfg: cfg.clone(),
            layout,
            params,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            cfg: self.cfg.clone(),
            layout: self.layout.clone(),
            params: self.params.cast(),
        }
    }

    fn p(&self, i: usize) -> &[T] {
        self.params.get(i)
    }

    fn attn_shape(&self, layer: usize, valid: usize) -> AttnShape {
        AttnShape {
            len: self.cfg.seq_len,
            dim: self.cfg.embed_dim,
            heads: self.cfg.heads,
            window: self.cfg.window,
            shift: if layer % 2 == 1 { self.cfg.shift } else { 0 },
            valid,
        }
    }

    fn attn_params(&self, st: &StIdx) -> AttnParams<'_, T> {
        AttnParams {
            qkv_w: self.p(st.qkv_w),
            qkv_b: self.p(st.qkv_b),
            proj_w: self.p(st.proj_w),
            proj_b: self.p(st.proj_b),
            rel_bias: self.p(st.rel_bias),
        }
    }

    /// Kernel-1 embedding, token-major `[L, C]`.
    pub fn embed(&self, input: &PreparedInput) -> Vec<T> {
        self.embed_tokens(&input.token_major())
    }

    fn embed_tokens(&self, x0: &[T]) -> Vec<T> {
        let (l, c) = (self.cfg.seq_len, self.cfg.embed_dim);
        let mut e = vec![T::zero(); l * c];
        linear_fwd(x0, l, 4, self.p(self.layout.embed_w), self.p(self.layout.embed_b), c, &mut e);
        e
    }

    fn st_fwd(&self, st: &StIdx, layer: usize, valid: usize, x: &[T], cache: &mut StCache<T>) -> Vec<T> {
        let (l, c) = (self.cfg.seq_len, self.cfg.embed_dim);
        let hid = c * self.cfg.mlp_ratio;
        let mut a = vec![T::zero(); l * c];
        cache.ln1 = layernorm_fwd(x, c, self.p(st.norm1_g), self.p(st.norm1_b), &mut a);
        let mut t = vec![T::zero(); l * c];
        cache.attn = attention_fwd(&self.attn_shape(layer, valid), &self.attn_params(st), &a, &mut t);
        cache.a = a;
        let z1: Vec<T> = x.iter().zip(&t).map(|(&u, &v)| u + v).collect();
        let mut b = vec![T::zero(); l * c];
        cache.ln2 = layernorm_fwd(&z1, c, self.p(st.norm2_g), self.p(st.norm2_b), &mut b);
        let mut h = vec![T::zero(); l * hid];
        linear_fwd(&b, l, c, self.p(st.fc1_w), self.p(st.fc1_b), hid, &mut h);
        let g: Vec<T> = h.iter().map(|&v| gelu(v)).collect();
        let mut z2 = z1;
        let mut m = vec![T::zero(); l * c];
        linear_fwd(&g, l, hid, self.p(st.fc2_w), self.p(st.fc2_b), c, &mut m);
        for (o, &v) in z2.iter_mut().zip(&m) {
            *o += v;
        }
        cache.b = b;
        cache.h = h;
        cache.g = g;
        z2
    }

    /// Returns the gradient with respect to the layer input.
    fn st_bwd(
        &self,
        st: &StIdx,
        layer: usize,
        valid: usize,
        cache: &StCache<T>,
        dz2: &[T],
        grads: &mut Params<T>,
    ) -> Vec<T> {
        let (l, c) = (self.cfg.seq_len, self.cfg.embed_dim);
        let hid = c * self.cfg.mlp_ratio;
        let mut dg = vec![T::zero(); l * hid];
        {
            let (dw, db) = pair_mut(grads, st.fc2_w, st.fc2_b);
            linear_bwd(&cache.g, l, hid, self.p(st.fc2_w), c, dz2, Some(&mut dg), dw, db);
        }
        for (d, &h) in dg.iter_mut().zip(&cache.h) {
            *d *= gelu_grad(h);
        }
        let mut dbn = vec![T::zero(); l * c];
        {
            let (dw, db) = pair_mut(grads, st.fc1_w, st.fc1_b);
            linear_bwd(&cache.b, l, c, self.p(st.fc1_w), hid, &dg, Some(&mut dbn), dw, db);
        }
        let mut dz1 = dz2.to_vec();
        {
            let (dgm, dbt) = pair_mut(grads, st.norm2_g, st.norm2_b);
            layernorm_bwd(&dbn, c, &cache.ln2, self.p(st.norm2_g), &mut dz1, dgm, dbt);
        }
        let mut da = vec![T::zero(); l * c];
        {
            let [qw, qb, pw, pb, rb] = grads
                .tensors
                .get_disjoint_mut([st.qkv_w, st.qkv_b, st.proj_w, st.proj_b, st.rel_bias])
                .expect("distinct tensors");
            let g = AttnGrads {
                qkv_w: &mut qw.data,
                qkv_b: &mut qb.data,
                proj_w: &mut pw.data,
                proj_b: &mut pb.data,
                rel_bias: &mut rb.data,
            };
            attention_bwd(&self.attn_shape(layer, valid), &self.attn_params(st), &cache.a, &cache.attn, &dz1, &mut da, g);
        }
        let mut dx = dz1;
        {
            let (dgm, dbt) = pair_mut(grads, st.norm1_g, st.norm1_b);
            layernorm_bwd(&da, c, &cache.ln1, self.p(st.norm1_g), &mut dx, dgm, dbt);
        }
        dx
    }

    fn rstb_fwd(&self, r: &RstbIdx, valid: usize, x: &[T], cache: &mut RstbCache<T>) -> Vec<T> {
        let (l, c) = (self.cfg.seq_len, self.cfg.embed_dim);
        let mut s = x.to_vec();
        cache.layers = vec![StCache::default(); r.layers.len()];
        for (k, st) in r.layers.iter().enumerate() {
            s = self.st_fwd(st, k, valid, &s, &mut cache.layers[k]);
        }
        let mut out = vec![T::zero(); l * c];
        linear_fwd(&s, l, c, self.p(r.lin_w), self.p(r.lin_b), c, &mut out);
        for (o, &v) in out.iter_mut().zip(x) {
            *o += v;
        }
        cache.s = s;
        out
    }

    fn rstb_bwd(&self, r: &RstbIdx, valid: usize, cache: &RstbCache<T>, dout: &[T], grads: &mut Params<T>) -> Vec<T> {
        let (l, c) = (self.cfg.seq_len, self.cfg.embed_dim);
        let mut ds = vec![T::zero(); l * c];
        {
            let (dw, db) = pair_mut(grads, r.lin_w, r.lin_b);
            linear_bwd(&cache.s, l, c, self.p(r.lin_w), c, dout, Some(&mut ds), dw, db);
        }
        for k in (0..r.layers.len()).rev() {
            ds = self.st_bwd(&r.layers[k], k, valid, &cache.layers[k], &ds, grads);
        }
        for (d, &g) in ds.iter_mut().zip(dout) {
            *d += g;
        }
        ds
    }

    /// Deep features of an embedded sequence.
    pub fn dfe(&self, e: &[T], valid: usize) -> Vec<T> {
        let mut cache = ForwardCache::default();
        self.dfe_fwd(e, valid, &mut cache);
        cache.feature
    }

    fn dfe_fwd(&self, e: &[T], valid: usize, cache: &mut ForwardCache<T>) {
        let (l, c, f) = (self.cfg.seq_len, self.cfg.embed_dim, self.cfg.feature_dim);
        let valid = valid.min(l);
        cache.valid = valid;
        cache.rstb = vec![RstbCache::default(); self.layout.rstb.len()];
        let mut x = e.to_vec();
        for (r, idx) in self.layout.rstb.iter().enumerate() {
            x = self.rstb_fwd(idx, valid, &x, &mut cache.rstb[r]);
        }
        for (o, &v) in x.iter_mut().zip(e) {
            *o += v;
        }
        x[valid * c..].iter_mut().for_each(|v| *v = T::zero());
        let mut u = vec![T::zero(); l * c];
        conv1d3_fwd(&x, l, c, self.p(self.layout.conv_w), self.p(self.layout.conv_b), c, &mut u);
        let mut pooled = vec![T::zero(); c];
        if valid > 0 {
            for row in u.chunks_exact(c).take(valid) {
                for (p, &v) in pooled.iter_mut().zip(row) {
                    *p += v;
                }
            }
            let inv = T::one() / T::of(valid as f64);
            pooled.iter_mut().for_each(|p| *p *= inv);
        }
        let mut feature = vec![T::zero(); f];
        linear_fwd(&pooled, 1, c, self.p(self.layout.fc_w), self.p(self.layout.fc_b), f, &mut feature);
        cache.masked = x;
        cache.pooled = pooled;
        cache.feature = feature;
    }

    fn dfe_bwd(&self, cache: &ForwardCache<T>, dfeat: &[T], grads: &mut Params<T>) -> Vec<T> {
        let (l, c, f) = (self.cfg.seq_len, self.cfg.embed_dim, self.cfg.feature_dim);
        let valid = cache.valid;
        let mut dpooled = vec![T::zero(); c];
        {
            let (dw, db) = pair_mut(grads, self.layout.fc_w, self.layout.fc_b);
            linear_bwd(&cache.pooled, 1, c, self.p(self.layout.fc_w), f, dfeat, Some(&mut dpooled), dw, db);
        }
        let mut du = vec![T::zero(); l * c];
        if valid > 0 {
            let inv = T::one() / T::of(valid as f64);
            for row in du.chunks_exact_mut(c).take(valid) {
                for (d, &g) in row.iter_mut().zip(&dpooled) {
                    *d = g * inv;
                }
            }
        }
        let mut dy = vec![T::zero(); l * c];
        {
            let (dw, db) = pair_mut(grads, self.layout.conv_w, self.layout.conv_b);
            conv1d3_bwd(&cache.masked, l, c, self.p(self.layout.conv_w), c, &du, &mut dy, dw, db);
        }
        dy[valid * c..].iter_mut().for_each(|v| *v = T::zero());
        let mut dx = dy.clone();
        for r in (0..self.layout.rstb.len()).rev() {
            dx = self.rstb_bwd(&self.layout.rstb[r], valid, &cache.rstb[r], &dx, grads);
        }
        for (d, &g) in dx.iter_mut().zip(&dy) {
            *d += g;
        }
        dx
    }

    /// Image generator: feature vector to a row-major `out_h x out_w` image.
    pub fn ig(&self, feature: &[T]) -> Vec<T> {
        let mut cache = IgCache::default();
        self.ig_fwd(feature, &mut cache)
    }

    fn ig_steps(&self) -> Vec<ConvT> {
        let mut cin = self.cfg.feature_dim;
        let mut size = 1;
        self.cfg
            .ig_channels()
            .iter()
            .enumerate()
            .map(|(k, &cout)| {
                let step = if k == 0 {
                    ConvT {
                        cin,
                        cout,
                        kernel: 4,
                        stride: 4,
                        pad: 0,
                        size,
                    }
                } else {
                    ConvT {
                        cin,
                        cout,
                        kernel: 4,
                        stride: 2,
                        pad: 1,
                        size,
                    }
                };
                cin = cout;
                size = step.out_size();
                step
            })
            .collect()
    }

    fn ig_fwd(&self, feature: &[T], cache: &mut IgCache<T>) -> Vec<T> {
        let slope = T::of(self.cfg.leaky_slope);
        let steps = self.ig_steps();
        cache.pre.clear();
        cache.act.clear();
        for (k, step) in steps.iter().enumerate() {
            let o = step.out_size();
            let mut pre = vec![T::zero(); step.cout * o * o];
            let (w, b) = self.layout.up[k];
            let x = if k == 0 { feature } else { &cache.act[k - 1] };
            step.forward(x, self.p(w), self.p(b), &mut pre);
            let act = pre.iter().map(|&v| leaky(v, slope)).collect();
            cache.pre.push(pre);
            cache.act.push(act);
        }
        let n = self.cfg.out_w;
        let last = steps.last().expect("at least one step");
        let mut img = vec![T::zero(); n * n];
        conv3x3_fwd(
            cache.act.last().expect("at least one step"),
            last.cout,
            n,
            self.p(self.layout.out_w),
            self.p(self.layout.out_b),
            1,
            &mut img,
        );
        img
    }

    fn ig_bwd(&self, feature: &[T], cache: &IgCache<T>, dimg: &[T], grads: &mut Params<T>) -> Vec<T> {
        let slope = T::of(self.cfg.leaky_slope);
        let steps = self.ig_steps();
        let n = self.cfg.out_w;
        let last = steps.last().expect("at least one step");
        let mut dact = vec![T::zero(); last.cout * n * n];
        {
            let (dw, db) = pair_mut(grads, self.layout.out_w, self.layout.out_b);
            conv3x3_bwd(cache.act.last().expect("step"), last.cout, n, self.p(self.layout.out_w), 1, dimg, &mut dact, dw, db);
        }
        for k in (0..steps.len()).rev() {
            let step = &steps[k];
            for (d, &p) in dact.iter_mut().zip(&cache.pre[k]) {
                *d *= leaky_grad(p, slope);
            }
            let x = if k == 0 { feature } else { &cache.act[k - 1] };
            let mut dx = vec![T::zero(); x.len()];
            let (w, b) = self.layout.up[k];
            let (dw, db) = pair_mut(grads, w, b);
            step.backward(x, self.p(w), &dact, Some(&mut dx), dw, db);
            dact = dx;
        }
        dact
    }

    /// Full pass on a prepared input, keeping what the backward pass needs.
    pub fn forward_cached(&self, input: &PreparedInput) -> (Vec<T>, ForwardCache<T>) {
        let mut cache = ForwardCache {
            x0: input.token_major(),
            ..ForwardCache::default()
        };
        let e = self.embed_tokens(&cache.x0);
        self.dfe_fwd(&e, input.valid, &mut cache);
        let mut ig = IgCache::default();
        let img = self.ig_fwd(&cache.feature, &mut ig);
        cache.ig = ig;
        (img, cache)
    }

    pub fn forward_input(&self, input: &PreparedInput) -> Vec<T> {
        self.forward_cached(input).0
    }

    /// Parameter gradients and the gradient with respect to the input
    /// (channel-major `[4, L]`, like [`PreparedInput::data`]).
    pub fn backward(&self, cache: &ForwardCache<T>, dimg: &[T]) -> (Params<T>, Vec<T>) {
        let mut grads = self.params.zeros_like();
        let dfeat = self.ig_bwd(&cache.feature, &cache.ig, dimg, &mut grads);
        let de = self.dfe_bwd(cache, &dfeat, &mut grads);
        let (l, c) = (self.cfg.seq_len, self.cfg.embed_dim);
        let mut dx0 = vec![T::zero(); l * 4];
        {
            let (dw, db) = pair_mut(&mut grads, self.layout.embed_w, self.layout.embed_b);
            linear_bwd(&cache.x0, l, 4, self.p(self.layout.embed_w), c, &de, Some(&mut dx0), dw, db);
        }
        let mut dinput = vec![T::zero(); 4 * l];
        for p in 0..l {
            for ch in 0..4 {
                dinput[ch * l + p] = dx0[p * 4 + ch];
            }
        }
        (grads, dinput)
    }

    /// Image of an event list; lists longer than `seq_len` are cropped.
    pub fn forward(&self, list: &EventList) -> AngularImage {
        let img = self.forward_input(&prepare_input(list, &self.cfg));
        let grid = Grid::new(self.cfg.out_w, self.cfg.out_h).expect("validated output size");
        AngularImage::from_values(grid, img.iter().map(|v| v.f64()).collect()).expect("matching size")
    }
}

impl Network<f32> {
    pub fn to_bytes(&self) -> Vec<u8> {
        encode_weights(&self.params, &self.cfg)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NetError> {
        let (params, cfg) = decode_weights(bytes)?;
        Self::from_params(&cfg, params)
    }
}

/// Standard normal truncated to two standard deviations.
fn trunc_normal(rng: &mut ccir_core::rng::Rng) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z;
        }
    }
}
