//! UNet assembly: residual blocks with time scale-shift conditioning,
//! multi-head self-attention over flattened pixels, skip connections
//! by channel concatenation, and avgpool / nearest-neighbor resampling
//! between levels.

use super::{timestep_embedding, UNetConfig, UNetParams};
use crate::error::TensorError;
use crate::tensor::{NodeId, Scalar, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

/// Softmax weight nodes collected from one attention block, one entry
/// per (batch element, head). Used for conditioning diagnostics.
pub struct AttentionProbe {
    pub level: usize,
    pub weights: Vec<NodeId>,
}

/// The denoising network. Holds only the architecture; parameters live
/// in a [`UNetParams`] store bound onto a tape per forward pass.
#[derive(Debug, Clone)]
pub struct UNet {
    cfg: UNetConfig,
}

/// Parameter leaves for one forward pass.
pub struct BoundParams {
    ids: HashMap<String, NodeId>,
}

impl BoundParams {
    /// Builds a binding from explicit (name, leaf) pairs; the
    /// finite-difference harness uses this to re-bind perturbed
    /// parameter tensors.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, NodeId)>) -> Self {
        BoundParams { ids: pairs.into_iter().collect() }
    }

    fn get(&self, name: &str) -> Result<NodeId, TensorError> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::invalid("unet_forward", format!("missing parameter {name}")))
    }

    pub fn id(&self, name: &str) -> Option<NodeId> {
        self.ids.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = (&String, &NodeId)> {
        self.ids.iter()
    }
}

struct LayerPlan {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

enum Init {
    Normal { fan_in: usize },
    Zeros,
    Ones,
}

impl UNet {
    pub fn new(cfg: UNetConfig) -> Result<Self, TensorError> {
        cfg.validate(None)?;
        Ok(UNet { cfg })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    fn decoder_in_channels(&self, level: usize) -> usize {
        let incoming = if level == self.cfg.levels() - 1 {
            self.cfg.level_channels(level)
        } else {
            self.cfg.level_channels(level + 1)
        };
        incoming + self.cfg.level_channels(level)
    }

    /// Every parameter in forward order: the single source of truth
    /// for initialization, binding, and checkpoint layout.
    fn plan(&self) -> Vec<LayerPlan> {
        fn push(plan: &mut Vec<LayerPlan>, name: String, shape: Vec<usize>, init: Init) {
            plan.push(LayerPlan { name, shape, init });
        }
        fn res_block(plan: &mut Vec<LayerPlan>, ted: usize, prefix: &str, cin: usize, cout: usize) {
            let p = |n: &str| format!("{prefix}.{n}");
            push(plan, p("norm1.g"), vec![cin], Init::Ones);
            push(plan, p("norm1.b"), vec![cin], Init::Zeros);
            push(plan, p("conv1.w"), vec![cout, cin, 3, 3], Init::Normal { fan_in: cin * 9 });
            push(plan, p("conv1.b"), vec![cout], Init::Zeros);
            push(plan, p("temb.w"), vec![2 * cout, ted], Init::Normal { fan_in: ted });
            push(plan, p("temb.b"), vec![2 * cout], Init::Zeros);
            push(plan, p("norm2.g"), vec![cout], Init::Ones);
            push(plan, p("norm2.b"), vec![cout], Init::Zeros);
            // Residual-branch output: zero so the block starts as the
            // identity (plus skip projection when widths change).
            push(plan, p("conv2.w"), vec![cout, cout, 3, 3], Init::Zeros);
            push(plan, p("conv2.b"), vec![cout], Init::Zeros);
            if cin != cout {
                push(plan, p("skip.w"), vec![cout, cin, 1, 1], Init::Normal { fan_in: cin });
                push(plan, p("skip.b"), vec![cout], Init::Zeros);
            }
        }
        fn attn_block(plan: &mut Vec<LayerPlan>, prefix: &str, c: usize) {
            let p = |n: &str| format!("{prefix}.{n}");
            push(plan, p("norm.g"), vec![c], Init::Ones);
            push(plan, p("norm.b"), vec![c], Init::Zeros);
            push(plan, p("qkv.w"), vec![3 * c, c, 1, 1], Init::Normal { fan_in: c });
            push(plan, p("qkv.b"), vec![3 * c], Init::Zeros);
            // Zero projection: the attention sublayer starts as identity.
            push(plan, p("proj.w"), vec![c, c, 1, 1], Init::Zeros);
            push(plan, p("proj.b"), vec![c], Init::Zeros);
        }

        let cfg = &self.cfg;
        let ted = cfg.time_embed_dim;
        let mut plan = Vec::new();

        push(&mut plan, "time_mlp.0.w".into(), vec![ted, ted], Init::Normal { fan_in: ted });
        push(&mut plan, "time_mlp.0.b".into(), vec![ted], Init::Zeros);
        push(&mut plan, "time_mlp.1.w".into(), vec![ted, ted], Init::Normal { fan_in: ted });
        push(&mut plan, "time_mlp.1.b".into(), vec![ted], Init::Zeros);

        push(
            &mut plan,
            "conv_in.w".into(),
            vec![cfg.base_channels, cfg.in_channels, 3, 3],
            Init::Normal { fan_in: cfg.in_channels * 9 },
        );
        push(&mut plan, "conv_in.b".into(), vec![cfg.base_channels], Init::Zeros);

        for l in 0..cfg.levels() {
            let cout = cfg.level_channels(l);
            for j in 0..cfg.num_res_blocks_per_level {
                let cin = if j > 0 {
                    cout
                } else if l == 0 {
                    cfg.base_channels
                } else {
                    cfg.level_channels(l - 1)
                };
                res_block(&mut plan, ted, &format!("enc.{l}.{j}"), cin, cout);
                if cfg.has_attention(l) {
                    attn_block(&mut plan, &format!("enc_attn.{l}.{j}"), cout);
                }
            }
        }

        let cm = cfg.level_channels(cfg.levels() - 1);
        res_block(&mut plan, ted, "mid.res1", cm, cm);
        if cfg.has_attention(cfg.levels() - 1) {
            attn_block(&mut plan, "mid.attn", cm);
        }
        res_block(&mut plan, ted, "mid.res2", cm, cm);

        for l in (0..cfg.levels()).rev() {
            let cout = cfg.level_channels(l);
            for j in 0..cfg.num_res_blocks_per_level {
                let cin = if j == 0 { self.decoder_in_channels(l) } else { cout };
                res_block(&mut plan, ted, &format!("dec.{l}.{j}"), cin, cout);
                if cfg.has_attention(l) {
                    attn_block(&mut plan, &format!("dec_attn.{l}.{j}"), cout);
                }
            }
        }

        push(&mut plan, "out_norm.g".into(), vec![cfg.base_channels], Init::Ones);
        push(&mut plan, "out_norm.b".into(), vec![cfg.base_channels], Init::Zeros);
        // Zero final conv: the network predicts zero noise at init.
        push(
            &mut plan,
            "conv_out.w".into(),
            vec![cfg.out_channels, cfg.base_channels, 3, 3],
            Init::Zeros,
        );
        push(&mut plan, "conv_out.b".into(), vec![cfg.out_channels], Init::Zeros);

        plan
    }

    /// Fresh parameter store, deterministic in `seed`.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> UNetParams<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = UNetParams::new();
        for layer in self.plan() {
            let value = match layer.init {
                Init::Zeros => Tensor::zeros(&layer.shape),
                Init::Ones => Tensor::ones(&layer.shape),
                Init::Normal { fan_in } => {
                    let std = T::from_f64(1.0 / (fan_in as f64).sqrt());
                    Tensor::randn(&layer.shape, &mut rng).map(|v| v * std)
                }
            };
            params.insert(layer.name, value);
        }
        params
    }

    /// Confirms a loaded store matches this architecture exactly.
    pub fn check_params<T: Scalar>(&self, params: &UNetParams<T>) -> Result<(), TensorError> {
        let plan = self.plan();
        if plan.len() != params.len() {
            return Err(TensorError::invalid(
                "unet_params",
                format!("expected {} parameters, store has {}", plan.len(), params.len()),
            ));
        }
        for layer in &plan {
            let p = params.get(&layer.name).ok_or_else(|| {
                TensorError::invalid("unet_params", format!("missing parameter {}", layer.name))
            })?;
            if p.value.shape() != layer.shape.as_slice() {
                return Err(TensorError::shape(
                    "unet_params",
                    format!("{}: {:?} vs {:?}", layer.name, p.value.shape(), layer.shape),
                ));
            }
        }
        Ok(())
    }

    /// Registers every parameter as a tape leaf.
    pub fn bind<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &UNetParams<T>,
        trainable: bool,
    ) -> Result<BoundParams, TensorError> {
        self.check_params(params)?;
        let mut ids = HashMap::with_capacity(params.len());
        for (name, p) in params.iter() {
            ids.insert(name.clone(), tape.leaf(p.value.clone(), trainable));
        }
        Ok(BoundParams { ids })
    }

    /// Pulls leaf gradients off a finished tape into the store.
    pub fn accumulate_from_tape<T: Scalar>(
        &self,
        tape: &Tape<T>,
        bound: &BoundParams,
        params: &mut UNetParams<T>,
    ) -> Result<(), TensorError> {
        for (name, &id) in bound.ids() {
            if let Some(g) = tape.grad(id) {
                params.accumulate_grad(name, g)?;
            }
        }
        Ok(())
    }

    fn res_block<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        prefix: &str,
        h: NodeId,
        temb: NodeId,
        cout: usize,
    ) -> Result<NodeId, TensorError> {
        let cfg = &self.cfg;
        let p = |n: &str| format!("{prefix}.{n}");
        let x0 = h;
        let cin = tape.shape(h)[1];

        let n1g = bound.get(&p("norm1.g"))?;
        let n1b = bound.get(&p("norm1.b"))?;
        let mut h = tape.group_norm(h, n1g, n1b, cfg.norm_groups, 1e-5)?;
        h = tape.silu(h);
        let c1w = bound.get(&p("conv1.w"))?;
        let c1b = bound.get(&p("conv1.b"))?;
        h = tape.conv2d(h, c1w, c1b, 1, 1)?;

        // Per-channel scale/shift from the time embedding.
        let tw = bound.get(&p("temb.w"))?;
        let tb = bound.get(&p("temb.b"))?;
        let temb_act = tape.silu(temb);
        let ss = tape.linear(temb_act, tw, tb)?; // [1, 2*cout]
        let ss4 = tape.reshape(ss, vec![1, 2 * cout, 1, 1])?;
        let scale_rows = tape.head_rows(ss4, 0, 0, cout)?; // [1, cout]
        let scale = tape.reshape(scale_rows, vec![cout])?;
        let shift_rows = tape.head_rows(ss4, 0, cout, 2 * cout)?;
        let shift = tape.reshape(shift_rows, vec![cout])?;

        let n2g = bound.get(&p("norm2.g"))?;
        let n2b = bound.get(&p("norm2.b"))?;
        h = tape.group_norm(h, n2g, n2b, cfg.norm_groups, 1e-5)?;
        h = tape.scale_shift(h, scale, shift)?;
        h = tape.silu(h);
        let c2w = bound.get(&p("conv2.w"))?;
        let c2b = bound.get(&p("conv2.b"))?;
        h = tape.conv2d(h, c2w, c2b, 1, 1)?;

        let skip = if cin != cout {
            let sw = bound.get(&p("skip.w"))?;
            let sb = bound.get(&p("skip.b"))?;
            tape.conv2d(x0, sw, sb, 1, 0)?
        } else {
            x0
        };
        tape.add(skip, h)
    }

    fn attn_block<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        prefix: &str,
        h: NodeId,
        level: usize,
        probes: Option<&mut Vec<AttentionProbe>>,
    ) -> Result<NodeId, TensorError> {
        let cfg = &self.cfg;
        let p = |n: &str| format!("{prefix}.{n}");
        let shape = tape.shape(h).to_vec();
        let (n, c, hh, ww) = (shape[0], shape[1], shape[2], shape[3]);
        let heads = cfg.num_heads;
        let dh = c / heads;
        let x0 = h;

        let ng = bound.get(&p("norm.g"))?;
        let nb = bound.get(&p("norm.b"))?;
        let normed = tape.group_norm(h, ng, nb, cfg.norm_groups, 1e-5)?;
        let qw = bound.get(&p("qkv.w"))?;
        let qb = bound.get(&p("qkv.b"))?;
        let qkv = tape.conv2d(normed, qw, qb, 1, 0)?; // [n, 3c, hh, ww]

        let mut probe_weights = Vec::new();
        let mut parts = Vec::with_capacity(n * heads);
        for ni in 0..n {
            for hd in 0..heads {
                let q = tape.head_rows(qkv, ni, hd * dh, (hd + 1) * dh)?;
                let k = tape.head_rows(qkv, ni, c + hd * dh, c + (hd + 1) * dh)?;
                let v = tape.head_rows(qkv, ni, 2 * c + hd * dh, 2 * c + (hd + 1) * dh)?;
                // Inline of softmax_attention, keeping a handle on the
                // weight matrix for probing.
                let kt = tape.transpose2d(k)?;
                let scores = tape.matmul(q, kt)?;
                let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
                let weights = tape.softmax_rows(scaled)?;
                probe_weights.push(weights);
                parts.push(tape.matmul(weights, v)?);
            }
        }
        if let Some(probes) = probes {
            probes.push(AttentionProbe { level, weights: probe_weights });
        }
        let merged = tape.stack_heads(&parts, n, c, hh, ww)?;
        let pw = bound.get(&p("proj.w"))?;
        let pb = bound.get(&p("proj.b"))?;
        let proj = tape.conv2d(merged, pw, pb, 1, 0)?;
        tape.add(x0, proj)
    }

    /// Predicts the noise residual for the diffused state given the
    /// conditioning planes and timestep.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        state_t: NodeId,
        cond: NodeId,
        t: usize,
        total_steps: usize,
    ) -> Result<NodeId, TensorError> {
        self.forward_inner(tape, bound, state_t, cond, t, total_steps, None)
    }

    /// Same as [`UNet::forward`] but also returns the softmax weight
    /// nodes of every attention block.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_probed<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        state_t: NodeId,
        cond: NodeId,
        t: usize,
        total_steps: usize,
    ) -> Result<(NodeId, Vec<AttentionProbe>), TensorError> {
        let mut probes = Vec::new();
        let out = self.forward_inner(tape, bound, state_t, cond, t, total_steps, Some(&mut probes))?;
        Ok((out, probes))
    }

    #[allow(clippy::too_many_arguments)]
    fn forward_inner<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        state_t: NodeId,
        cond: NodeId,
        t: usize,
        total_steps: usize,
        mut probes: Option<&mut Vec<AttentionProbe>>,
    ) -> Result<NodeId, TensorError> {
        let cfg = &self.cfg;
        let ss = tape.shape(state_t).to_vec();
        let cs = tape.shape(cond).to_vec();
        if ss.len() != 4 || cs.len() != 4 {
            return Err(TensorError::shape(
                "unet_forward",
                format!("state {:?} and cond {:?} must be [N,C,H,W]", ss, cs),
            ));
        }
        if ss[1] != cfg.out_channels {
            return Err(TensorError::shape(
                "unet_forward",
                format!("state channels {} != out_channels {}", ss[1], cfg.out_channels),
            ));
        }
        if ss[1] + cs[1] != cfg.in_channels {
            return Err(TensorError::shape(
                "unet_forward",
                format!("state {} + cond {} channels != in_channels {}", ss[1], cs[1], cfg.in_channels),
            ));
        }
        if ss[0] != cs[0] || ss[2] != cs[2] || ss[3] != cs[3] {
            return Err(TensorError::shape(
                "unet_forward",
                format!("state {:?} vs cond {:?}", ss, cs),
            ));
        }
        self.cfg.validate(Some((ss[2], ss[3])))?;

        // Time embedding enters as a constant leaf; its MLP is trained.
        let emb = timestep_embedding::<T>(t, cfg.time_embed_dim, total_steps)?
            .reshape(vec![1, cfg.time_embed_dim])?;
        let emb = tape.leaf(emb, false);
        let w0 = bound.get("time_mlp.0.w")?;
        let b0 = bound.get("time_mlp.0.b")?;
        let mut temb = tape.linear(emb, w0, b0)?;
        temb = tape.silu(temb);
        let w1 = bound.get("time_mlp.1.w")?;
        let b1 = bound.get("time_mlp.1.b")?;
        let temb = tape.linear(temb, w1, b1)?;

        let x = tape.concat_channels(&[state_t, cond])?;
        let cw = bound.get("conv_in.w")?;
        let cb = bound.get("conv_in.b")?;
        let mut h = tape.conv2d(x, cw, cb, 1, 1)?;

        let mut skips = Vec::with_capacity(cfg.levels());
        for l in 0..cfg.levels() {
            if l > 0 {
                h = tape.avg_pool_2x(h)?;
            }
            let cout = cfg.level_channels(l);
            for j in 0..cfg.num_res_blocks_per_level {
                h = self.res_block(tape, bound, &format!("enc.{l}.{j}"), h, temb, cout)?;
                if cfg.has_attention(l) {
                    h = self.attn_block(
                        tape,
                        bound,
                        &format!("enc_attn.{l}.{j}"),
                        h,
                        l,
                        probes.as_deref_mut(),
                    )?;
                }
            }
            skips.push(h);
        }

        let cm = cfg.level_channels(cfg.levels() - 1);
        h = self.res_block(tape, bound, "mid.res1", h, temb, cm)?;
        if cfg.has_attention(cfg.levels() - 1) {
            h = self.attn_block(tape, bound, "mid.attn", h, cfg.levels() - 1, probes.as_deref_mut())?;
        }
        h = self.res_block(tape, bound, "mid.res2", h, temb, cm)?;

        for l in (0..cfg.levels()).rev() {
            h = tape.concat_channels(&[h, skips[l]])?;
            let cout = cfg.level_channels(l);
            for j in 0..cfg.num_res_blocks_per_level {
                h = self.res_block(tape, bound, &format!("dec.{l}.{j}"), h, temb, cout)?;
                if cfg.has_attention(l) {
                    h = self.attn_block(
                        tape,
                        bound,
                        &format!("dec_attn.{l}.{j}"),
                        h,
                        l,
                        probes.as_deref_mut(),
                    )?;
                }
            }
            if l > 0 {
                h = tape.upsample_nearest_2x(h)?;
            }
        }

        let og = bound.get("out_norm.g")?;
        let ob = bound.get("out_norm.b")?;
        h = tape.group_norm(h, og, ob, cfg.norm_groups, 1e-5)?;
        h = tape.silu(h);
        let ow = bound.get("conv_out.w")?;
        let obias = bound.get("conv_out.b")?;
        tape.conv2d(h, ow, obias, 1, 1)
    }

    /// Forward-only convenience: runs on a throwaway tape.
    pub fn predict<T: Scalar>(
        &self,
        params: &UNetParams<T>,
        state_t: &Tensor<T>,
        cond: &Tensor<T>,
        t: usize,
        total_steps: usize,
    ) -> Result<Tensor<T>, TensorError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, params, false)?;
        let s = tape.leaf(state_t.clone(), false);
        let c = tape.leaf(cond.clone(), false);
        let out = self.forward(&mut tape, &bound, s, c, t, total_steps)?;
        Ok(tape.value(out).clone())
    }
}
