//! Joint-pair discriminator forward pass.

use super::{BoundParams, DiscriminatorDescriptor, ForwardCtx, ModelBundle, NetDescriptor};
use crate::autodiff::{Tape, Var};

const BN_EPS: f64 = 1e-5;

/// Runs the six-layer ladder on a 2-channel pair batch.
///
/// Returns `(map, scores)`: the sigmoid score map `[N, 1, h, w]` with each
/// side `ceil(input / 32)`, and the per-pair scalar score `[N]` (mean over
/// the map).
pub fn forward_discriminator(
    tape: &mut Tape,
    bundle: &ModelBundle,
    p: &BoundParams,
    pair: Var,
    ctx: &ForwardCtx,
) -> (Var, Var) {
    let NetDescriptor::Discriminator { .. } = &bundle.descriptor else {
        panic!("forward_discriminator on a non-discriminator bundle");
    };
    let (_, c, _, _) = tape.value(pair).dims4();
    assert_eq!(c, DiscriminatorDescriptor::IN_CHANNELS, "discriminator wants a 2-channel pair");

    let n_layers = DiscriminatorDescriptor::FILTERS.len();
    let mut cur = pair;
    for i in 0..n_layers {
        let last = i == n_layers - 1;
        let stride = DiscriminatorDescriptor::STRIDES[i];
        let pad = if DiscriminatorDescriptor::KERNELS[i] == 3 { 1 } else { 0 };
        let w = p.get(&format!("layer{i}.conv.w"));
        if last {
            let b = p.get(&format!("layer{i}.conv.b"));
            cur = tape.conv2d(cur, w, Some(b), stride, pad);
            cur = tape.sigmoid(cur);
        } else {
            cur = tape.conv2d(cur, w, None, stride, pad);
            cur = tape.batchnorm2d(
                cur,
                p.get(&format!("layer{i}.bn.g")),
                p.get(&format!("layer{i}.bn.b")),
                BN_EPS,
                ctx.frozen_bn,
            );
            cur = tape.relu(cur);
        }
    }

    let (n, _, h, w) = tape.value(cur).dims4();
    let flat = tape.reshape(cur, &[n, h * w]);
    let sums = tape.sum_last(flat);
    let scores = tape.scale(sums, 1.0 / (h * w) as f64);
    (cur, scores)
}
