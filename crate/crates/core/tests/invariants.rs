//! Property tests for invariants that hold for any valid input.

use eraselab::diffcore::{Rng, Stream, Tensor};
use eraselab::guidance::{erase_energy, erase_target, product_map};
use eraselab::ppm::to_byte;
use eraselab::schedule::{ddim_invert_step, ddim_step, make_linear_schedule};
use eraselab::training::{gen_scene, gen_two_object_scene};
use proptest::prelude::*;

fn map_strategy() -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(0.0f32..1.0, 16)
}

proptest! {
    #[test]
    fn alpha_bar_decreases_strictly_inside_unit_interval(
        steps in 2usize..400,
        start in 1e-5f64..1e-2,
        span in 1e-4f64..0.5,
    ) {
        let sched = make_linear_schedule(steps, start, start + span).unwrap();
        let ab = sched.alpha_bars();
        prop_assert_eq!(ab.len(), steps + 1);
        prop_assert_eq!(ab[0], 1.0);
        for w in ab.windows(2) {
            prop_assert!(w[1] < w[0] && w[1] > 0.0);
        }
    }

    #[test]
    fn ddim_invert_then_step_round_trips(
        z in prop::collection::vec(-3.0f64..3.0, 12),
        e in prop::collection::vec(-3.0f64..3.0, 12),
        t in 1usize..200,
        gap in 1usize..50,
    ) {
        let sched = make_linear_schedule(200, 1e-4, 0.02).unwrap();
        let t_next = (t + gap).min(200);
        prop_assume!(t_next > t);
        let z = Tensor::<f64>::new(&[3, 2, 2], z).unwrap();
        let e = Tensor::<f64>::new(&[3, 2, 2], e).unwrap();
        let up = ddim_invert_step(&z, &e, t, t_next, &sched).unwrap();
        let mut rng = Rng::new(0, Stream::SampleNoise);
        let back = ddim_step(&up, &e, t_next, t, &sched, 0.0, &mut rng).unwrap();
        prop_assert!(back.max_abs_diff(&z).unwrap() < 1e-9);
    }

    #[test]
    fn erase_target_lies_between_min_and_max(a in map_strategy(), lambda in 0.0f64..=1.0) {
        let t = Tensor::new(&[4, 4], a).unwrap();
        let c = erase_target(&t, lambda);
        prop_assert!(c >= t.min() as f64 - 1e-12 && c <= t.max() as f64 + 1e-12);
    }

    #[test]
    fn energy_is_nonnegative_and_zero_at_unit_target(a in map_strategy(), lambda in 0.0f64..=1.0) {
        let t = Tensor::new(&[4, 4], a).unwrap();
        prop_assert!(erase_energy(&t, lambda).unwrap() >= 0.0);
        // A map whose min and max are both 1 has c = 1 for every λ.
        prop_assert_eq!(erase_energy(&Tensor::full(&[4, 4], 1.0), lambda).unwrap(), 0.0);
    }

    #[test]
    fn product_map_peaks_at_one(a in map_strategy(), b in map_strategy()) {
        let ta = Tensor::new(&[4, 4], a).unwrap();
        let tb = Tensor::new(&[4, 4], b).unwrap();
        let w = product_map(&[ta, tb]).unwrap();
        prop_assert!(w.min() >= 0.0);
        prop_assert!(w.max() == 1.0 || w.max() == 0.0);
    }

    #[test]
    fn byte_mapping_is_monotone(x in -2.0f32..2.0, dx in 0.0f32..1.0) {
        prop_assert!(to_byte(x) <= to_byte(x + dx));
    }

    #[test]
    fn scenes_render_in_range_with_disjoint_masks(seed in any::<u64>(), two in any::<bool>()) {
        let mut rng = Rng::new(seed, Stream::DataGen);
        let scene = if two { gen_two_object_scene(&mut rng) } else { gen_scene(&mut rng) };
        if two {
            prop_assert_eq!(scene.objects.len(), 2);
        }
        let img = scene.render();
        prop_assert_eq!(img.shape(), &[3, 16, 16]);
        prop_assert!(img.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let masks = scene.masks();
        for m in &masks {
            prop_assert!(m.sum_f64() > 0.0);
        }
        if masks.len() == 2 {
            prop_assert_eq!(masks[0].mul(&masks[1]).unwrap().sum_f64(), 0.0);
        }
        for i in 0..scene.objects.len() {
            let phrase = scene.phrase(i).unwrap();
            prop_assert_eq!(scene.find_object(&phrase).unwrap(), i);
        }
    }
}
