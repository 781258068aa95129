use advinpaint::masks::{compose_output, make_discounted_mask, BinaryMask, PatchRect, DEFAULT_ALPHA};
use candle_core::{DType, Device, Tensor};
use proptest::prelude::*;

fn rect_in(h: usize, w: usize) -> impl Strategy<Value = PatchRect> {
    (0..w, 0..h).prop_flat_map(move |(l, t)| {
        (l..w, t..h).prop_map(move |(r, b)| PatchRect { left: l, top: t, right: r, bottom: b })
    })
}

proptest! {
    #[test]
    fn rect_text_round_trips(rect in rect_in(64, 64)) {
        let back = PatchRect::parse(&rect.to_string()).unwrap();
        prop_assert_eq!(back, rect);
        prop_assert!(rect.validate(64, 64).is_ok());
        prop_assert!(rect.validate(rect.bottom, 64).is_err());
    }

    #[test]
    fn downsample_marks_blocks_touching_the_hole(rect in rect_in(32, 32), f in prop::sample::select(vec![1usize, 2, 4, 8])) {
        let mask = BinaryMask::new(32, 32, rect).unwrap();
        let small = mask.downsample(32 / f, 32 / f).unwrap();
        for r in 0..32 / f {
            for c in 0..32 / f {
                let any = (0..f).any(|i| (0..f).any(|j| mask.is_hole(r * f + i, c * f + j)));
                prop_assert_eq!(small.is_hole(r, c), any, "({}, {})", r, c);
            }
        }
    }

    #[test]
    fn discount_is_one_outside_and_decays_inward(rect in rect_in(24, 24)) {
        let mask = BinaryMask::new(24, 24, rect).unwrap();
        let d = make_discounted_mask(&mask, DEFAULT_ALPHA).unwrap();
        for row in 0..24 {
            for col in 0..24 {
                let v = d.at(row, col);
                if mask.is_hole(row, col) {
                    prop_assert!(v > 0.0 && v <= 1.0 / DEFAULT_ALPHA + 1e-12);
                } else {
                    prop_assert_eq!(v, 1.0);
                }
            }
        }
    }

    #[test]
    fn composition_keeps_background_bits(rect in rect_in(16, 16), seed in any::<u64>()) {
        let dev = Device::Cpu;
        let mask = BinaryMask::new(16, 16, rect).unwrap();
        let noise = |s: u64| {
            let v: Vec<f32> = (0..3 * 256).map(|i| (((i as u64 + 1).wrapping_mul(s | 1) >> 7) % 1000) as f32 / 999.0).collect();
            Tensor::from_vec(v, (1, 3, 16, 16), &dev).unwrap()
        };
        let (syn, src) = (noise(seed), noise(seed ^ 0x9e37));
        let out = compose_output(&syn, &src, &mask.to_tensor(DType::F32, &dev).unwrap()).unwrap();
        let (o, s, g) = (
            out.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            src.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            syn.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
        );
        for i in 0..o.len() {
            let (row, col) = ((i % 256) / 16, i % 16);
            let want = if mask.is_hole(row, col) { g[i] } else { s[i] };
            prop_assert_eq!(o[i].to_bits(), want.to_bits());
        }
    }
}
