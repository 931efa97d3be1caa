//! Auto prompt generator.
//!
//! Learnable task tokens are coupled with a frozen copy of the decoder's
//! output tokens, and the resulting token set is coupled with the image
//! embedding. The first `k` coupled tokens become the sparse prompt, a small
//! conv head on the coupled image tokens becomes the dense prompt, and the
//! coupled image tokens replace the image embedding during decoding.
//!
//! Every coupling occurrence has its own weights; the registry names spell
//! out which one (`tokens.task.*`, `tokens.output.*`, `image.feat.*`,
//! `image.token.*`).

use candle_core::Tensor;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{self, Activation, Conv2d, Linear, Mlp};
use crate::registry::{Init, Param, ParamBuilder};
use crate::sam_head::PromptBundle;

/// `C(A, B) = MLP(softmax(A Wq (B Wk)^T / sqrt(d)) (B Wv))`.
#[derive(Clone, Debug)]
pub struct CouplingBlock {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    mlp: Mlp,
    dim: usize,
}

impl CouplingBlock {
    pub fn new(mut pb: ParamBuilder, dim: usize) -> Result<Self> {
        let init = Init::FanIn { fan_in: dim, gain: 1.0 };
        Ok(Self {
            wq: Linear::new(pb.pp("wq"), dim, dim, false, init)?,
            wk: Linear::new(pb.pp("wk"), dim, dim, false, init)?,
            wv: Linear::new(pb.pp("wv"), dim, dim, false, init)?,
            mlp: Mlp::new(pb.pp("mlp"), &[dim, dim, dim], Activation::Gelu, |n| Init::FanIn {
                fan_in: n,
                gain: 1.0,
            })?,
            dim,
        })
    }

    pub fn wq(&self) -> &Linear {
        &self.wq
    }
    pub fn wk(&self) -> &Linear {
        &self.wk
    }
    pub fn wv(&self) -> &Linear {
        &self.wv
    }
    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    /// `a`: `(b, n, d)`, `b_`: `(b, m, d)` → `(b, n, d)`.
    pub fn forward(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let da = a.dim(2)?;
        let db = b.dim(2)?;
        if da != self.dim || db != self.dim {
            return Err(Error::shape("coupling channels", self.dim, (da, db)));
        }
        let q = self.wq.forward(a)?;
        let k = self.wk.forward(b)?;
        let v = self.wv.forward(b)?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? / (self.dim as f64).sqrt())?;
        let mixed = nn::softmax_last(&scores)?.matmul(&v)?;
        self.mlp.forward(&mixed)
    }
}

/// `C(C(A, B), C(B, A))`: the nested coupling used by both update stages.
#[derive(Clone, Debug)]
pub struct NestedCoupling {
    inner_q: CouplingBlock,
    inner_kv: CouplingBlock,
    outer: CouplingBlock,
}

impl NestedCoupling {
    fn new(mut pb: ParamBuilder, dim: usize) -> Result<Self> {
        Ok(Self {
            inner_q: CouplingBlock::new(pb.pp("inner_q"), dim)?,
            inner_kv: CouplingBlock::new(pb.pp("inner_kv"), dim)?,
            outer: CouplingBlock::new(pb.pp("outer"), dim)?,
        })
    }

    pub fn forward(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let x = self.inner_q.forward(a, b)?;
        let y = self.inner_kv.forward(b, a)?;
        self.outer.forward(&x, &y)
    }

    pub fn blocks(&self) -> [&CouplingBlock; 3] {
        [&self.inner_q, &self.inner_kv, &self.outer]
    }
}

/// Outputs of one APG pass.
#[derive(Clone, Debug)]
pub struct GeneratedPrompts {
    pub prompts: PromptBundle,
    /// `(b, g, g, d)`, substitutes the encoder output during decoding.
    pub image_embedding: Tensor,
    /// `(b, k + 5, d)` coupled token set; the first `k` rows are the sparse prompt.
    pub tokens: Tensor,
}

#[derive(Clone, Debug)]
pub struct AutoPromptGenerator {
    /// `(num_tasks, k, d)`.
    task_tokens: Param,
    task_update: NestedCoupling,
    task_combine: Linear,
    output_update: NestedCoupling,
    output_combine: Linear,
    image_update: NestedCoupling,
    token_update: NestedCoupling,
    dense_head: Vec<Conv2d>,
    k: usize,
    dim: usize,
    grid: usize,
    num_tasks: usize,
}

impl AutoPromptGenerator {
    pub fn new(mut pb: ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.embed_dim;
        let k = cfg.task_token_count;
        let task_tokens = pb.get("task_tokens", &[cfg.num_tasks, k, d], Init::TruncNormal { std: 1.0 })?;
        let mut tp = pb.pp("tokens");
        let task_update = NestedCoupling::new(tp.pp("task"), d)?;
        let task_combine = Linear::new(tp.pp("task").pp("combine"), d, d, false, Init::Zeros)?;
        let output_update = NestedCoupling::new(tp.pp("output"), d)?;
        let output_combine = Linear::new(tp.pp("output").pp("combine"), d, d, false, Init::Zeros)?;
        let mut ip = pb.pp("image");
        let image_update = NestedCoupling::new(ip.pp("feat"), d)?;
        let token_update = NestedCoupling::new(ip.pp("token"), d)?;
        let channels = [d, d / 4, d / 4, d / 4, d];
        let dense_head = channels
            .windows(2)
            .enumerate()
            .map(|(i, c)| {
                Conv2d::new(
                    pb.pp("dense").pp(i),
                    c[0],
                    c[1],
                    3,
                    1,
                    1,
                    true,
                    Init::FanIn { fan_in: 9 * c[0], gain: 1.0 },
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            task_tokens,
            task_update,
            task_combine,
            output_update,
            output_combine,
            image_update,
            token_update,
            dense_head,
            k,
            dim: d,
            grid: cfg.grid_side(),
            num_tasks: cfg.num_tasks,
        })
    }

    pub fn task_count(&self) -> usize {
        self.num_tasks
    }

    pub fn task_token_count(&self) -> usize {
        self.k
    }

    pub fn task_combine(&self) -> &Linear {
        &self.task_combine
    }

    pub fn output_combine(&self) -> &Linear {
        &self.output_combine
    }

    /// All twelve coupling blocks, in registry-name order.
    pub fn coupling_blocks(&self) -> Vec<&CouplingBlock> {
        [&self.task_update, &self.output_update, &self.image_update, &self.token_update]
            .into_iter()
            .flat_map(|n| n.blocks())
            .collect()
    }

    /// `(k, d)` tokens of `task`.
    pub fn task_tokens(&self, task: usize) -> Result<Tensor> {
        if task >= self.num_tasks {
            return Err(Error::UnknownTask(format!("task id {task} (bank holds {})", self.num_tasks)));
        }
        Ok(self.task_tokens.tensor().get(task)?)
    }

    /// Token update on `(b, k, d)` task tokens and `(b, 5, d)` output tokens:
    /// `T_t1 = C(C(T_t, T_o), C(T_o, T_t)) W_t + T_t`, and the swapped form for `T_o1`.
    pub fn update_tokens(&self, t_t: &Tensor, t_o: &Tensor) -> Result<(Tensor, Tensor)> {
        let t_t1 = (self.task_combine.forward(&self.task_update.forward(t_t, t_o)?)? + t_t)?;
        let t_o1 = (self.output_combine.forward(&self.output_update.forward(t_o, t_t)?)? + t_o)?;
        Ok((t_t1, t_o1))
    }

    /// Dense prompt head on a `(b, g, g, d)` grid.
    pub fn dense_head(&self, grid: &Tensor) -> Result<Tensor> {
        let mut x = nn::bhwc_to_nchw(grid)?;
        let n = self.dense_head.len();
        for (i, conv) in self.dense_head.iter().enumerate() {
            x = conv.forward(&x)?;
            if i + 1 < n {
                x = nn::gelu(&x)?;
            }
        }
        nn::nchw_to_bhwc(&x)
    }

    pub fn dense_convs(&self) -> &[Conv2d] {
        &self.dense_head
    }

    /// `image`: fused encoder output `(b, g, g, d)`; `output_tokens`: the
    /// decoder's `(5, d)` tokens (detached by the caller).
    pub fn generate(&self, image: &Tensor, output_tokens: &Tensor, task: usize) -> Result<GeneratedPrompts> {
        let (b, h, w, d) = image.dims4()?;
        if (h, w, d) != (self.grid, self.grid, self.dim) {
            return Err(Error::shape("APG image embedding", (self.grid, self.grid, self.dim), (h, w, d)));
        }
        let t_t = self.task_tokens(task)?.unsqueeze(0)?.broadcast_as((b, self.k, d))?.contiguous()?;
        let n_out = output_tokens.dim(0)?;
        let t_o = output_tokens.unsqueeze(0)?.broadcast_as((b, n_out, d))?.contiguous()?;
        let (t_t1, t_o1) = self.update_tokens(&t_t, &t_o)?;
        let tokens = Tensor::cat(&[&t_t1, &t_o1], 1)?;
        let f = image.reshape((b, h * w, d))?;
        let f_new = self.image_update.forward(&f, &tokens)?;
        let t_new = self.token_update.forward(&tokens, &f)?;
        let sparse = t_new.narrow(1, 0, self.k)?;
        let f_grid = f_new.reshape((b, h, w, d))?;
        let dense = self.dense_head(&f_grid)?;
        Ok(GeneratedPrompts {
            prompts: PromptBundle { sparse, dense },
            image_embedding: f_grid,
            tokens: t_new,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::{Component, ParamRegistry};
    use crate::testutil::{gelu, max_rel_err, rand_tensor};
    use candle_core::DType;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
        t.to_vec2::<f64>().unwrap()
    }

    fn linear(x: &[f64], lin: &Linear) -> Vec<f64> {
        let w = to_rows(&lin.weight().value());
        let b = lin.bias().map(|b| b.value().to_vec1::<f64>().unwrap());
        w.iter()
            .enumerate()
            .map(|(o, row)| row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b.as_ref().map_or(0.0, |b| b[o]))
            .collect()
    }

    /// Nested-loop attention + MLP.
    fn couple_oracle(blk: &CouplingBlock, a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let d = blk.dim as f64;
        let keys: Vec<_> = b.iter().map(|r| linear(r, blk.wk())).collect();
        let vals: Vec<_> = b.iter().map(|r| linear(r, blk.wv())).collect();
        a.iter()
            .map(|row| {
                let q = linear(row, blk.wq());
                let logits: Vec<f64> = keys
                    .iter()
                    .map(|k| q.iter().zip(k).map(|(x, y)| x * y).sum::<f64>() / d.sqrt())
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let s: f64 = e.iter().sum();
                let mut mixed = vec![0.0; blk.dim];
                for (wgt, v) in e.iter().zip(&vals) {
                    for (acc, x) in mixed.iter_mut().zip(v) {
                        *acc += wgt / s * x;
                    }
                }
                let layers = blk.mlp().layers();
                let h: Vec<f64> = linear(&mixed, &layers[0]).into_iter().map(gelu).collect();
                linear(&h, &layers[1])
            })
            .collect()
    }

    fn block(d: usize, seed: u64) -> (CouplingBlock, ParamRegistry) {
        let mut reg = ParamRegistry::new(DType::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blk = CouplingBlock::new(ParamBuilder::new(&mut reg, &mut rng, Component::Apg), d).unwrap();
        (blk, reg)
    }

    fn max_rel(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
        max_rel_err(&a.concat(), &b.concat(), 1e-12)
    }

    #[test]
    fn couple_matches_loop_oracle() {
        let (blk, _reg) = block(4, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_tensor(&mut rng, &[1, 2, 4]);
        let b = rand_tensor(&mut rng, &[1, 3, 4]);
        let out = blk.forward(&a, &b).unwrap().squeeze(0).unwrap();
        let oracle = couple_oracle(&blk, &to_rows(&a.squeeze(0).unwrap()), &to_rows(&b.squeeze(0).unwrap()));
        assert!(max_rel(&to_rows(&out), &oracle) < 1e-6);
    }

    #[test]
    fn singleton_keys_give_mlp_of_value() {
        let (blk, _reg) = block(4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rand_tensor(&mut rng, &[1, 1, 4]);
        let b = rand_tensor(&mut rng, &[1, 1, 4]);
        let out = blk.forward(&a, &b).unwrap();
        let expect = blk.mlp().forward(&blk.wv().forward(&b).unwrap()).unwrap();
        let diff = (out - expect).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-12);
    }

    #[test]
    fn duplicated_keys_leave_output_unchanged() {
        let (blk, _reg) = block(4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = rand_tensor(&mut rng, &[1, 2, 4]);
        let b = rand_tensor(&mut rng, &[1, 3, 4]);
        let bb = Tensor::cat(&[&b, &b], 1).unwrap();
        let out = to_rows(&blk.forward(&a, &b).unwrap().squeeze(0).unwrap());
        let dup = to_rows(&blk.forward(&a, &bb).unwrap().squeeze(0).unwrap());
        let oracle = couple_oracle(&blk, &to_rows(&a.squeeze(0).unwrap()), &to_rows(&bb.squeeze(0).unwrap()));
        assert!(max_rel(&out, &dup) < 1e-9);
        assert!(max_rel(&dup, &oracle) < 1e-6);
    }

    #[test]
    fn couple_preserves_query_rows_and_checks_channels() {
        let (blk, _reg) = block(4, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for (n, m) in [(1, 5), (7, 2), (3, 3)] {
            let out = blk
                .forward(&rand_tensor(&mut rng, &[2, n, 4]), &rand_tensor(&mut rng, &[2, m, 4]))
                .unwrap();
            assert_eq!(out.dims(), &[2, n, 4]);
        }
        let err = blk.forward(&rand_tensor(&mut rng, &[1, 2, 4]), &rand_tensor(&mut rng, &[1, 2, 3]));
        assert!(matches!(err, Err(Error::Shape { .. })));
    }

    fn apg(cfg: &ModelConfig) -> (AutoPromptGenerator, ParamRegistry) {
        let mut reg = ParamRegistry::new(DType::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let apg = AutoPromptGenerator::new(ParamBuilder::new(&mut reg, &mut rng, Component::Apg).pp("apg"), cfg).unwrap();
        (apg, reg)
    }

    #[test]
    fn zero_combiner_keeps_tokens() {
        let cfg = ModelConfig::desk().validate().unwrap();
        let (apg, _reg) = apg(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let t_t = rand_tensor(&mut rng, &[1, 4, 32]);
        let t_o = rand_tensor(&mut rng, &[1, 5, 32]);
        let (t_t1, t_o1) = apg.update_tokens(&t_t, &t_o).unwrap();
        assert_eq!(t_t1.dims(), &[1, 4, 32]);
        assert_eq!(t_o1.dims(), &[1, 5, 32]);
        assert_eq!(to_rows(&t_t1.squeeze(0).unwrap()), to_rows(&t_t.squeeze(0).unwrap()));
    }

    #[test]
    fn generated_shapes_and_task_slicing() {
        let cfg = ModelConfig {
            num_tasks: 2,
            ..ModelConfig::desk()
        }
        .validate()
        .unwrap();
        let (apg, reg) = apg(&cfg);
        for (name, entry) in reg.iter() {
            if name.ends_with("combine.weight") {
                let mut rng = ChaCha8Rng::seed_from_u64(11);
                entry.param.set(&rand_tensor(&mut rng, &[32, 32])).unwrap();
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let image = rand_tensor(&mut rng, &[1, 8, 8, 32]);
        let t_o = rand_tensor(&mut rng, &[5, 32]);
        let a = apg.generate(&image, &t_o, 0).unwrap();
        let b = apg.generate(&image, &t_o, 1).unwrap();
        assert_eq!(a.prompts.sparse.dims(), &[1, 4, 32]);
        assert_eq!(a.prompts.dense.dims(), &[1, 8, 8, 32]);
        assert_eq!(a.image_embedding.dims(), &[1, 8, 8, 32]);
        assert_eq!(a.tokens.dims(), &[1, 9, 32]);
        let sa = to_rows(&a.prompts.sparse.squeeze(0).unwrap());
        let sb = to_rows(&b.prompts.sparse.squeeze(0).unwrap());
        assert_ne!(sa, sb);
        // sparse prompt is the task side of the coupled token set
        assert_eq!(sa, to_rows(&a.tokens.squeeze(0).unwrap())[..4].to_vec());
        assert!(matches!(apg.generate(&image, &t_o, 2), Err(Error::UnknownTask(_))));
    }

    #[test]
    fn dense_head_channel_schedule() {
        let cfg = ModelConfig::desk().validate().unwrap();
        let (apg, _reg) = apg(&cfg);
        let chans: Vec<_> = apg.dense_convs().iter().map(|c| c.weight().shape().dims()[0]).collect();
        assert_eq!(chans, vec![8, 8, 8, 32]);
        assert_eq!(apg.coupling_blocks().len(), 12);
    }
}
