//! `(dx, dy, dw, dh)` box parametrization relative to a reference box.

use crate::geometry::BBox;

/// Largest allowed `|dw|`, `|dh|` after scaling by the std.
pub const MAX_LOG_RATIO: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

pub fn encode(reference: &BBox, target: &BBox, stds: [f64; 4]) -> [f64; 4] {
    let (pw, ph) = (reference.width().max(1e-6), reference.height().max(1e-6));
    let (pcx, pcy) = reference.center();
    let (gw, gh) = (target.width().max(1e-6), target.height().max(1e-6));
    let (gcx, gcy) = target.center();
    [
        (gcx - pcx) / pw / stds[0],
        (gcy - pcy) / ph / stds[1],
        (gw / pw).ln() / stds[2],
        (gh / ph).ln() / stds[3],
    ]
}

pub fn decode(reference: &BBox, deltas: [f64; 4], stds: [f64; 4]) -> BBox {
    let (pw, ph) = (reference.width(), reference.height());
    let (pcx, pcy) = reference.center();
    let cx = pcx + deltas[0] * stds[0] * pw;
    let cy = pcy + deltas[1] * stds[1] * ph;
    let w = pw * (deltas[2] * stds[2]).clamp(-MAX_LOG_RATIO, MAX_LOG_RATIO).exp();
    let h = ph * (deltas[3] * stds[3]).clamp(-MAX_LOG_RATIO, MAX_LOG_RATIO).exp();
    BBox {
        x1: cx - w / 2.0,
        y1: cy - h / 2.0,
        x2: cx + w / 2.0,
        y2: cy + h / 2.0,
    }
}

/// Pulls a gradient on the decoded corners back onto the deltas.
pub fn decode_backward(reference: &BBox, deltas: [f64; 4], stds: [f64; 4], dbox: [f64; 4]) -> [f64; 4] {
    let (pw, ph) = (reference.width(), reference.height());
    let lw = deltas[2] * stds[2];
    let lh = deltas[3] * stds[3];
    let w = pw * lw.clamp(-MAX_LOG_RATIO, MAX_LOG_RATIO).exp();
    let h = ph * lh.clamp(-MAX_LOG_RATIO, MAX_LOG_RATIO).exp();
    let gw = if lw.abs() < MAX_LOG_RATIO { 0.5 * w * stds[2] } else { 0.0 };
    let gh = if lh.abs() < MAX_LOG_RATIO { 0.5 * h * stds[3] } else { 0.0 };
    let [dx1, dy1, dx2, dy2] = dbox;
    [
        (dx1 + dx2) * stds[0] * pw,
        (dy1 + dy2) * stds[1] * ph,
        (dx2 - dx1) * gw,
        (dy2 - dy1) * gh,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const STDS: [f64; 4] = [0.1, 0.1, 0.2, 0.2];

    #[test]
    fn zero_deltas_are_identity() {
        let b = BBox::new(3.0, 4.0, 13.0, 24.0);
        assert_eq!(decode(&b, [0.0; 4], STDS), b);
        assert_eq!(encode(&b, &b, STDS), [0.0; 4]);
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(
            x in 0.0f64..50.0, y in 0.0f64..50.0, w in 1.0f64..40.0, h in 1.0f64..40.0,
            tx in 0.0f64..50.0, ty in 0.0f64..50.0, tw in 1.0f64..40.0, th in 1.0f64..40.0,
        ) {
            let r = BBox::from_xywh(x, y, w, h);
            let t = BBox::from_xywh(tx, ty, tw, th);
            let back = decode(&r, encode(&r, &t, STDS), STDS);
            for (a, b) in back.to_array().iter().zip(t.to_array()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn decode_backward_matches_finite_differences(
            d in proptest::array::uniform4(-2.0f64..2.0),
            g in proptest::array::uniform4(-1.0f64..1.0),
        ) {
            let r = BBox::new(2.0, 3.0, 17.0, 11.0);
            let f = |d: [f64; 4]| -> f64 {
                decode(&r, d, STDS).to_array().iter().zip(&g).map(|(a, b)| a * b).sum()
            };
            let an = decode_backward(&r, d, STDS, g);
            for k in 0..4 {
                let (mut p, mut m) = (d, d);
                p[k] += 1e-6;
                m[k] -= 1e-6;
                let fd = (f(p) - f(m)) / 2e-6;
                prop_assert!((fd - an[k]).abs() < 1e-6 * (1.0 + fd.abs()));
            }
        }
    }
}
