use proptest::prelude::*;
use squant::eval::{conv2d_forward, fc_forward, Activation, Padding};

/// Scatter form: every input pixel pushes `W * x` into the outputs it
/// reaches, the transpose of the gather loop under test.
fn conv_scatter(input: &Activation, w: &[f64], [m, n, kh, kw]: [usize; 4], padding: Padding) -> Activation {
    let (oh, ow, off_h, off_w) = match padding {
        Padding::Valid => (input.h + 1 - kh, input.w + 1 - kw, kh as isize - 1, kw as isize - 1),
        Padding::Same => (input.h, input.w, ((kh - 1) / 2) as isize, ((kw - 1) / 2) as isize),
    };
    let mut out = Activation::zeros(m, oh, ow);
    for c in 0..n {
        for y in 0..input.h {
            for x in 0..input.w {
                let v = input.at(c, y, x);
                for i in 0..kh {
                    for j in 0..kw {
                        // output (oy, ox) reads input (oy + off - i, ox + off - j)
                        let oy = y as isize + i as isize - off_h;
                        let ox = x as isize + j as isize - off_w;
                        if oy < 0 || ox < 0 || oy >= oh as isize || ox >= ow as isize {
                            continue;
                        }
                        for o in 0..m {
                            let wv = w[((o * n + c) * kh + i) * kw + j];
                            out.data[(o * oh + oy as usize) * ow + ox as usize] += wv * v;
                        }
                    }
                }
            }
        }
    }
    out
}

fn ints(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((-8i32..8).prop_map(f64::from), len)
}

prop_compose! {
    fn case()(m in 1usize..4, n in 1usize..4, kh in 1usize..4, kw in 1usize..4, extra_h in 0usize..4, extra_w in 0usize..4, same in any::<bool>())
        (w in ints(m * n * kh * kw), x in ints(n * (kh + extra_h) * (kw + extra_w)),
         m in Just(m), n in Just(n), kh in Just(kh), kw in Just(kw), h in Just(kh + extra_h), wd in Just(kw + extra_w), same in Just(same))
        -> ([usize; 4], Vec<f64>, Activation, Padding)
    {
        let pad = if same { Padding::Same } else { Padding::Valid };
        ([m, n, kh, kw], w, Activation { c: n, h, w: wd, data: x }, pad)
    }
}

proptest! {
    // Integer-valued operands keep both summation orders exact.
    #[test]
    fn gather_equals_scatter((shape, w, x, pad) in case()) {
        let a = conv2d_forward(&x, &w, shape, pad).unwrap();
        let b = conv_scatter(&x, &w, shape, pad);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn linear_in_weights((shape, w, x, pad) in case(), alpha in -3i32..4) {
        let alpha = f64::from(alpha);
        let w2: Vec<f64> = w.iter().rev().copied().collect();
        let combo: Vec<f64> = w.iter().zip(&w2).map(|(a, b)| alpha * a + b).collect();
        let lhs = conv2d_forward(&x, &combo, shape, pad).unwrap();
        let ya = conv2d_forward(&x, &w, shape, pad).unwrap();
        let yb = conv2d_forward(&x, &w2, shape, pad).unwrap();
        for ((l, a), b) in lhs.data.iter().zip(&ya.data).zip(&yb.data) {
            prop_assert_eq!(*l, alpha * a + b);
        }
    }

    #[test]
    fn linear_in_input((shape, w, x, pad) in case(), alpha in -3i32..4) {
        let alpha = f64::from(alpha);
        let x2 = Activation { data: x.data.iter().map(|v| 1.0 - v).collect(), ..x.clone() };
        let combo = Activation { data: x.data.iter().zip(&x2.data).map(|(a, b)| alpha * a + b).collect(), ..x.clone() };
        let lhs = conv2d_forward(&combo, &w, shape, pad).unwrap();
        let ya = conv2d_forward(&x, &w, shape, pad).unwrap();
        let yb = conv2d_forward(&x2, &w, shape, pad).unwrap();
        for ((l, a), b) in lhs.data.iter().zip(&ya.data).zip(&yb.data) {
            prop_assert_eq!(*l, alpha * a + b);
        }
    }
}

#[test]
fn flipped_kernel_tap_lands_on_mirrored_offset() {
    // A single nonzero tap at (i, j) shifts the input by (i, j), so a true
    // convolution moves an impulse down-right, not up-left.
    let mut x = Activation::zeros(1, 5, 5);
    x.data[2 * 5 + 2] = 1.0;
    let mut w = vec![0.0; 9];
    w[2 * 3 + 2] = 1.0; // tap (2, 2)
    let y = conv2d_forward(&x, &w, [1, 1, 3, 3], Padding::Same).unwrap();
    assert_eq!(y.at(0, 3, 3), 1.0);
    assert_eq!(y.data.iter().filter(|&&v| v != 0.0).count(), 1);
}

#[test]
fn fc_matches_matrix_vector_product() {
    let w = [1.0, 2.0, 3.0, -1.0, 0.5, 4.0];
    let x = [2.0, -1.0, 0.25];
    let y = fc_forward(&x, &w, 2, 3).unwrap();
    assert_eq!(y, vec![2.0 - 2.0 + 0.75, -2.0 - 0.5 + 1.0]);
}
