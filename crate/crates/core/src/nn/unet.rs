//! Shared U-Net trunk and the mapping-network forward pass.

use super::{BoundParams, ForwardCtx, HeadActivation, MappingNetDescriptor, ModelBundle, NetDescriptor};
use crate::autodiff::{Tape, Var};

const BN_EPS: f64 = 1e-5;

fn conv_bn_relu(
    tape: &mut Tape,
    p: &BoundParams,
    name_conv: &str,
    name_bn: &str,
    x: Var,
    ctx: &ForwardCtx,
) -> Var {
    let c = tape.conv2d(x, p.get(&format!("{name_conv}.w")), None, 1, 1);
    let n = tape.batchnorm2d(
        c,
        p.get(&format!("{name_bn}.g")),
        p.get(&format!("{name_bn}.b")),
        BN_EPS,
        ctx.frozen_bn,
    );
    tape.relu(n)
}

/// U-Net trunk: returns the pre-head feature map and, for analysis, every
/// conv-block activation in forward order.
pub(super) fn unet_trunk(
    tape: &mut Tape,
    p: &BoundParams,
    prefix: &str,
    desc: &MappingNetDescriptor,
    x: Var,
    ctx: &ForwardCtx,
    activations: &mut Vec<(String, Var)>,
) -> Var {
    let (_, _, h, w) = tape.value(x).dims4();
    let div = 1 << desc.levels;
    assert!(
        h % div == 0 && w % div == 0,
        "input {h}x{w} not divisible by 2^{}",
        desc.levels
    );

    let mut skips = Vec::with_capacity(desc.levels);
    let mut cur = x;
    for l in 0..desc.levels {
        let a = conv_bn_relu(tape, p, &format!("{prefix}enc{l}.conv1"), &format!("{prefix}enc{l}.bn1"), cur, ctx);
        let b = conv_bn_relu(tape, p, &format!("{prefix}enc{l}.conv2"), &format!("{prefix}enc{l}.bn2"), a, ctx);
        activations.push((format!("{prefix}enc{l}"), b));
        skips.push(b);
        cur = tape.maxpool2(b);
    }
    let a = conv_bn_relu(tape, p, &format!("{prefix}bott.conv1"), &format!("{prefix}bott.bn1"), cur, ctx);
    cur = conv_bn_relu(tape, p, &format!("{prefix}bott.conv2"), &format!("{prefix}bott.bn2"), a, ctx);
    activations.push((format!("{prefix}bott"), cur));

    for l in (0..desc.levels).rev() {
        let up = tape.upsample_bilinear2(cur);
        let merged = if desc.use_skip_connections { tape.concat_channels(up, skips[l]) } else { up };
        let a = conv_bn_relu(tape, p, &format!("{prefix}dec{l}.conv1"), &format!("{prefix}dec{l}.bn1"), merged, ctx);
        cur = conv_bn_relu(tape, p, &format!("{prefix}dec{l}.conv2"), &format!("{prefix}dec{l}.bn2"), a, ctx);
        activations.push((format!("{prefix}dec{l}"), cur));
    }
    cur
}

pub(super) fn apply_head(
    tape: &mut Tape,
    p: &BoundParams,
    name: &str,
    x: Var,
    head: HeadActivation,
) -> Var {
    let y = tape.conv2d(x, p.get(&format!("{name}.w")), Some(p.get(&format!("{name}.b"))), 1, 0);
    match head {
        HeadActivation::Sigmoid => tape.sigmoid(y),
        HeadActivation::Relu => tape.relu(y),
        HeadActivation::None => y,
    }
}

/// Mapping-network forward: same spatial shape out, values in (0, 1) for
/// the sigmoid head.
pub fn forward_mapping(
    tape: &mut Tape,
    bundle: &ModelBundle,
    p: &BoundParams,
    x: Var,
    ctx: &ForwardCtx,
) -> Var {
    let NetDescriptor::Mapping { desc, in_channels, head, .. } = &bundle.descriptor else {
        panic!("forward_mapping on a non-mapping bundle");
    };
    let (_, c, _, _) = tape.value(x).dims4();
    assert_eq!(c, *in_channels, "mapping net input channels");
    let mut acts = Vec::new();
    let trunk = unet_trunk(tape, p, "", desc, x, ctx, &mut acts);
    apply_head(tape, p, "head.conv", trunk, *head)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{central_diff, max_rel_err};
    use crate::autodiff::{Tape, Tensor};
    use crate::nn::{build_mapping, register};
    use rand::Rng;

    fn rand_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(0.0..1.0)).collect())
    }

    #[test]
    fn shape_preserved_64() {
        let mut rng = crate::rng::stream(4, "unet-test");
        let desc = MappingNetDescriptor { levels: 4, base_channels: 2, use_skip_connections: true };
        let net = build_mapping(&desc, 1, 1, HeadActivation::Sigmoid, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(rand_tensor(&[2, 1, 64, 64], &mut rng));
        let p = register(&mut tape, &net);
        let y = forward_mapping(&mut tape, &net, &p, x, &ForwardCtx::default());
        assert_eq!(tape.value(y).shape, vec![2, 1, 64, 64]);
        assert!(tape.value(y).data.iter().all(|v| (0.0..1.0).contains(v)));
    }

    #[test]
    fn batch_independence_with_frozen_bn() {
        let mut rng = crate::rng::stream(5, "unet-test");
        let desc = MappingNetDescriptor { levels: 2, base_channels: 4, use_skip_connections: true };
        let net = build_mapping(&desc, 1, 1, HeadActivation::Sigmoid, &mut rng).unwrap();
        let ctx = ForwardCtx { frozen_bn: true, ..Default::default() };

        let batch = rand_tensor(&[3, 1, 8, 8], &mut rng);
        let mut zeroed = batch.clone();
        for v in &mut zeroed.data[64..128] {
            *v = 0.0;
        }

        let run = |input: Tensor| -> Tensor {
            let mut tape = Tape::new();
            let x = tape.leaf(input);
            let p = register(&mut tape, &net);
            let y = forward_mapping(&mut tape, &net, &p, x, &ctx);
            tape.value(y).clone()
        };
        let a = run(batch);
        let b = run(zeroed);
        assert_eq!(a.data[0..64], b.data[0..64], "sample 0 must be unaffected");
        assert_eq!(a.data[128..192], b.data[128..192], "sample 2 must be unaffected");
        assert_ne!(a.data[64..128], b.data[64..128]);
    }

    #[test]
    fn skip_toggle_preserves_shape_contract() {
        let mut rng = crate::rng::stream(6, "unet-test");
        for skip in [true, false] {
            let desc = MappingNetDescriptor { levels: 2, base_channels: 2, use_skip_connections: skip };
            let net = build_mapping(&desc, 1, 1, HeadActivation::Sigmoid, &mut rng).unwrap();
            let mut tape = Tape::new();
            let x = tape.leaf(rand_tensor(&[1, 1, 12, 12], &mut rng));
            let p = register(&mut tape, &net);
            let y = forward_mapping(&mut tape, &net, &p, x, &ForwardCtx::default());
            assert_eq!(tape.value(y).shape, vec![1, 1, 12, 12]);
        }
    }

    #[test]
    fn mapping_gradients_match_finite_differences() {
        let mut rng = crate::rng::stream(7, "unet-grad");
        let desc = MappingNetDescriptor { levels: 2, base_channels: 2, use_skip_connections: true };
        let net = build_mapping(&desc, 1, 1, HeadActivation::Sigmoid, &mut rng).unwrap();
        let input = rand_tensor(&[1, 1, 8, 8], &mut rng);
        // frozen batch-norm: batch statistics couple every activation to
        // every parameter, putting ReLU/maxpool kinks inside the FD step.
        // The batch-stat backward has its own dedicated op-level check.
        let ctx = ForwardCtx { frozen_bn: true, ..Default::default() };

        let mut tape = Tape::new();
        let x = tape.leaf(input.clone());
        let p = register(&mut tape, &net);
        let y = forward_mapping(&mut tape, &net, &p, x, &ctx);
        let root = tape.mean(y);
        let grads = tape.backward(root);

        for (pi, param) in net.params.iter().enumerate() {
            let analytic = grads.get_or_zeros(p.vars[pi], &param.value.shape).data;
            let f = |theta: &[f64]| -> f64 {
                let mut net = net.clone();
                net.params[pi].value.data = theta.to_vec();
                let mut tape = Tape::new();
                let x = tape.leaf(input.clone());
                let p = register(&mut tape, &net);
                let y = forward_mapping(&mut tape, &net, &p, x, &ctx);
                let root = tape.mean(y);
                tape.value(root).item()
            };
            let fd = central_diff(f, &param.value.data, 1e-3);
            let err = max_rel_err(&analytic, &fd);
            assert!(err < 1e-3, "param {} rel err {err}", param.name);
        }
    }
}
