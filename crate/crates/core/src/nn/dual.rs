//! Dual-modelling network: shared U-Net feature extractor, local conv
//! branch, and global self-attention branch over feature patches.

use super::unet::{apply_head, unet_trunk};
use super::{BoundParams, DualNetDescriptor, ForwardCtx, HeadActivation, ModelBundle, NetDescriptor};
use crate::autodiff::{Tape, Tensor, Var};
use crate::{Error, Result};

const BN_EPS: f64 = 1e-5;
const LN_EPS: f64 = 1e-5;

/// PE[pos, 2i] = sin(pos / 10000^(2i/d)), PE[pos, 2i+1] = cos(...).
pub fn sinusoidal_position_encoding(n_positions: usize, d_model: usize) -> Result<Tensor> {
    if d_model % 2 != 0 {
        return Err(Error::invalid("sinusoidal encoding needs an even model dim"));
    }
    let mut data = vec![0.0; n_positions * d_model];
    for pos in 0..n_positions {
        for i in 0..d_model / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            data[pos * d_model + 2 * i] = (pos as f64 * freq).sin();
            data[pos * d_model + 2 * i + 1] = (pos as f64 * freq).cos();
        }
    }
    Ok(Tensor::from_vec(&[n_positions, d_model], data))
}

/// Pre-norm self-attention stack over a token sequence [N, L, D].
///
/// Exposed separately so the permutation-equivariance property can be
/// checked directly on tokens.
pub fn attention_tokens(
    tape: &mut Tape,
    p: &BoundParams,
    desc: &DualNetDescriptor,
    tokens: Var,
    ctx: &ForwardCtx,
) -> Var {
    let (n, l, d) = tape.value(tokens).dims3();
    assert_eq!(d, desc.model_dim());
    let heads = desc.heads;
    let dh = d / heads;

    let mut x = if ctx.use_positional_encoding {
        let pe = sinusoidal_position_encoding(l, d).expect("even model dim");
        let pe_var = tape.leaf(pe);
        tape.add(tokens, pe_var)
    } else {
        tokens
    };

    let linear = |tape: &mut Tape, p: &BoundParams, name: &str, x: Var, rows: usize, din: usize, dout: usize| {
        let flat = tape.reshape(x, &[rows, din]);
        let y = tape.matmul(flat, p.get(&format!("{name}.w")));
        tape.add(y, p.get(&format!("{name}.b")))
    };

    for i in 0..desc.attention_blocks {
        let blk = format!("global.blk{i}");
        // attention sublayer
        let normed = tape.layernorm(x, p.get(&format!("{blk}.ln1.g")), p.get(&format!("{blk}.ln1.b")), LN_EPS);
        let q = linear(tape, p, &format!("{blk}.q"), normed, n * l, d, d);
        let k = linear(tape, p, &format!("{blk}.k"), normed, n * l, d, d);
        let v = linear(tape, p, &format!("{blk}.v"), normed, n * l, d, d);
        let q = tape.reshape(q, &[n, l, d]);
        let k = tape.reshape(k, &[n, l, d]);
        let v = tape.reshape(v, &[n, l, d]);
        let qh = tape.split_heads(q, heads);
        let kh = tape.split_heads(k, heads);
        let vh = tape.split_heads(v, heads);
        let kt = tape.transpose_last2(kh);
        let scores = tape.bmm(qh, kt);
        let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = tape.softmax_last(scaled);
        let ctxh = tape.bmm(attn, vh);
        let merged = tape.merge_heads(ctxh);
        let projected = linear(tape, p, &format!("{blk}.o"), merged, n * l, d, d);
        let projected = tape.reshape(projected, &[n, l, d]);
        x = tape.add(x, projected);

        // feed-forward sublayer (hidden 2x model dim)
        let normed = tape.layernorm(x, p.get(&format!("{blk}.ln2.g")), p.get(&format!("{blk}.ln2.b")), LN_EPS);
        let h1 = linear(tape, p, &format!("{blk}.ff1"), normed, n * l, d, 2 * d);
        let h1 = tape.relu(h1);
        let h2 = linear(tape, p, &format!("{blk}.ff2"), h1, n * l, 2 * d, d);
        let h2 = tape.reshape(h2, &[n, l, d]);
        x = tape.add(x, h2);
    }
    x
}

pub struct DualOutput {
    /// Local-branch probability map [N, 1, H, W].
    pub local: Var,
    /// Global-branch probability map [N, 1, H, W].
    pub global: Var,
    /// Shared feature maps [N, F, H, W].
    pub features: Var,
    /// Per-block feature-extractor activations, forward order.
    pub feature_activations: Vec<(String, Var)>,
}

/// Both branch predictions from the shared feature maps.
pub fn forward_dual(
    tape: &mut Tape,
    bundle: &ModelBundle,
    p: &BoundParams,
    x: Var,
    ctx: &ForwardCtx,
) -> DualOutput {
    let NetDescriptor::Dual { desc } = &bundle.descriptor else {
        panic!("forward_dual on a non-dual bundle");
    };
    let f = desc.feature_channels;
    let (_, _, h, w) = tape.value(x).dims4();
    assert!(
        h % desc.patch_size == 0 && w % desc.patch_size == 0,
        "feature map {h}x{w} not divisible by patch size {}",
        desc.patch_size
    );

    let mut acts = Vec::new();
    let trunk = unet_trunk(tape, p, "feat.", &desc.feature_extractor, x, ctx, &mut acts);
    let features = apply_head(tape, p, "feat.head.conv", trunk, HeadActivation::Relu);

    // local branch: three conv blocks then 1x1 + sigmoid
    let mut cur = features;
    for i in 0..3 {
        let c = tape.conv2d(cur, p.get(&format!("local.conv{i}.w")), None, 1, 1);
        let n = tape.batchnorm2d(
            c,
            p.get(&format!("local.bn{i}.g")),
            p.get(&format!("local.bn{i}.b")),
            BN_EPS,
            ctx.frozen_bn,
        );
        cur = tape.relu(n);
    }
    let local = apply_head(tape, p, "local.head", cur, HeadActivation::Sigmoid);

    // global branch: patch tokens -> attention -> reassemble -> 1x1 + sigmoid
    let tokens = tape.patchify(features, desc.patch_size);
    let attended = attention_tokens(tape, p, desc, tokens, ctx);
    let reassembled = tape.unpatchify(attended, f, h, w, desc.patch_size);
    let global = apply_head(tape, p, "global.head", reassembled, HeadActivation::Sigmoid);

    DualOutput { local, global, features, feature_activations: acts }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{central_diff, max_rel_err};
    use crate::nn::{build_dual, register, MappingNetDescriptor};
    use rand::Rng;

    fn small_desc() -> DualNetDescriptor {
        DualNetDescriptor {
            feature_extractor: MappingNetDescriptor { levels: 2, base_channels: 2, use_skip_connections: true },
            feature_channels: 2,
            patch_size: 4,
            attention_blocks: 1,
            heads: 2,
        }
    }

    fn rand_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(0.0..1.0)).collect())
    }

    #[test]
    fn positional_encoding_closed_form() {
        let pe = sinusoidal_position_encoding(16, 8).unwrap();
        for i in 0..4 {
            assert_eq!(pe.data[2 * i], 0.0, "sin(0) at even column {i}");
            assert_eq!(pe.data[2 * i + 1], 1.0, "cos(0) at odd column {i}");
        }
        assert!((pe.data[8] - 1f64.sin()).abs() < 1e-12, "PE[1, 0] = sin(1)");
        assert!((pe.data[8] - 0.84147).abs() < 1e-5);
        assert!(pe.data.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(sinusoidal_position_encoding(4, 7).is_err());
    }

    #[test]
    fn branch_shapes_match() {
        let mut rng = crate::rng::stream(11, "dual-test");
        let net = build_dual(&small_desc(), &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(rand_tensor(&[2, 1, 16, 16], &mut rng));
        let p = register(&mut tape, &net);
        let out = forward_dual(&mut tape, &net, &p, x, &ForwardCtx::default());
        assert_eq!(tape.value(out.local).shape, vec![2, 1, 16, 16]);
        assert_eq!(tape.value(out.local).shape, tape.value(out.global).shape);
        for v in tape.value(out.local).data.iter().chain(&tape.value(out.global).data) {
            assert!((0.0..1.0).contains(v));
        }
    }

    #[test]
    fn attention_permutation_equivariance_without_pe() {
        let mut rng = crate::rng::stream(12, "dual-test");
        let desc = small_desc();
        let net = build_dual(&desc, &mut rng).unwrap();
        let ctx = ForwardCtx { use_positional_encoding: false, ..Default::default() };
        let d = desc.model_dim();
        let l = 6;
        let tokens = rand_tensor(&[1, l, d], &mut rng);
        let perm = [3usize, 0, 4, 1, 5, 2];
        let mut permuted = Tensor::zeros(&[1, l, d]);
        for (dst, &src) in perm.iter().enumerate() {
            permuted.data[dst * d..(dst + 1) * d].copy_from_slice(&tokens.data[src * d..(src + 1) * d]);
        }

        let run = |input: Tensor| -> Tensor {
            let mut tape = Tape::new();
            let t = tape.leaf(input);
            let p = register(&mut tape, &net);
            let y = attention_tokens(&mut tape, &p, &desc, t, &ctx);
            tape.value(y).clone()
        };
        let base = run(tokens);
        let shuffled = run(permuted);
        let mut max_dev: f64 = 0.0;
        for (dst, &src) in perm.iter().enumerate() {
            for i in 0..d {
                max_dev = max_dev.max((shuffled.data[dst * d + i] - base.data[src * d + i]).abs());
            }
        }
        assert!(max_dev < 1e-5, "max deviation {max_dev}");
    }

    #[test]
    fn pe_breaks_permutation_equivariance() {
        let mut rng = crate::rng::stream(13, "dual-test");
        let desc = small_desc();
        let net = build_dual(&desc, &mut rng).unwrap();
        let ctx = ForwardCtx::default();
        let d = desc.model_dim();
        let tokens = rand_tensor(&[1, 4, d], &mut rng);
        let mut reversed = Tensor::zeros(&[1, 4, d]);
        for dst in 0..4 {
            let src = 3 - dst;
            reversed.data[dst * d..(dst + 1) * d].copy_from_slice(&tokens.data[src * d..(src + 1) * d]);
        }
        let run = |input: Tensor| -> Tensor {
            let mut tape = Tape::new();
            let t = tape.leaf(input);
            let p = register(&mut tape, &net);
            let y = attention_tokens(&mut tape, &p, &desc, t, &ctx);
            tape.value(y).clone()
        };
        let base = run(tokens);
        let shuffled = run(reversed);
        let mut max_dev: f64 = 0.0;
        for dst in 0..4 {
            let src = 3 - dst;
            for i in 0..d {
                max_dev = max_dev.max((shuffled.data[dst * d + i] - base.data[src * d + i]).abs());
            }
        }
        assert!(max_dev > 1e-4, "positional encoding should break equivariance");
    }

    #[test]
    fn dual_gradients_match_finite_differences() {
        let mut rng = crate::rng::stream(14, "dual-grad");
        let desc = DualNetDescriptor {
            feature_extractor: MappingNetDescriptor { levels: 2, base_channels: 2, use_skip_connections: true },
            feature_channels: 2,
            patch_size: 4,
            attention_blocks: 1,
            heads: 2,
        };
        let net = build_dual(&desc, &mut rng).unwrap();
        let input = rand_tensor(&[1, 1, 8, 8], &mut rng);
        let ctx = ForwardCtx { frozen_bn: true, ..Default::default() };

        let eval = |net: &ModelBundle| -> (Vec<Vec<f64>>, f64) {
            let mut tape = Tape::new();
            let x = tape.leaf(input.clone());
            let p = register(&mut tape, &net.clone());
            let out = forward_dual(&mut tape, net, &p, x, &ctx);
            let ml = tape.mean(out.local);
            let mg = tape.mean(out.global);
            let root = tape.add(ml, mg);
            let value = tape.value(root).item();
            let grads = tape.backward(root);
            let g = net
                .params
                .iter()
                .enumerate()
                .map(|(i, prm)| grads.get_or_zeros(p.vars[i], &prm.value.shape).data)
                .collect();
            (g, value)
        };
        let (analytic, _) = eval(&net);

        // spot-check a representative subset of parameters end to end
        for name in ["feat.enc0.conv1.w", "feat.head.conv.w", "local.conv1.w", "local.head.b", "global.blk0.q.w", "global.blk0.ff2.b", "global.head.w"] {
            let pi = net.param_index(name);
            let f = |theta: &[f64]| -> f64 {
                let mut n2 = net.clone();
                n2.params[pi].value.data = theta.to_vec();
                let mut tape = Tape::new();
                let x = tape.leaf(input.clone());
                let p = register(&mut tape, &n2);
                let out = forward_dual(&mut tape, &n2, &p, x, &ctx);
                let ml = tape.mean(out.local);
                let mg = tape.mean(out.global);
                let root = tape.add(ml, mg);
                tape.value(root).item()
            };
            let fd = central_diff(f, &net.params[pi].value.data, 1e-3);
            let err = max_rel_err(&analytic[pi], &fd);
            assert!(err < 1e-3, "param {name} rel err {err}");
        }
    }
}
