use proptest::prelude::*;

use spinereg::config::RegistrationConfig;
use spinereg::field::{compose, exp_svf, DisplacementField, VectorField, VelocityField, DEFAULT_STEPS};
use spinereg::io::{self, ElementType, MetaHeader};
use spinereg::metrics::{folding_count, rigid_dsc};
use spinereg::phantom::PhantomSpec;
use spinereg::rigidity::{self, RigidTransform};
use spinereg::volume::{Grid, LabelVolume, Volume};

fn small_grid() -> impl Strategy<Value = Grid> {
    (2usize..6, 2usize..6, 2usize..6).prop_map(|(a, b, c)| Grid::with_dims([a, b, c]).unwrap())
}

fn wave(grid: Grid, k: [f64; 3], amp: f64) -> VelocityField {
    VelocityField(VectorField::from_fn(grid, |p| {
        [
            amp * (k[0] * p[1] + 0.3).sin(),
            amp * (k[1] * p[2] - 0.2).cos(),
            amp * (k[2] * p[0] + 0.1 * p[1]).sin(),
        ]
    }))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn volume_bytes_round_trip(grid in small_grid(), seed in any::<u64>()) {
        let vol = Volume::from_fn(grid, |x, y, z| ((x * 31 + y * 7 + z) as f64 + seed as f64 % 97.0).sin() as f32 as f64);
        let header = MetaHeader { grid, channels: 1, element_type: ElementType::Float32, data_file: "v.raw".into() };
        let text = header.to_text();
        let parsed = MetaHeader::parse(&text).unwrap();
        prop_assert_eq!(&parsed, &header);
        let back = io::decode_volume(&parsed, &io::encode_volume(&vol)).unwrap();
        prop_assert_eq!(back, vol);
    }

    #[test]
    fn label_bytes_round_trip(grid in small_grid(), ids in prop::collection::vec(0u16..5, 8)) {
        let labels = LabelVolume::from_fn(grid, |x, y, z| ids[(x + 2 * y + 3 * z) % ids.len()]);
        let header = MetaHeader { grid, channels: 1, element_type: ElementType::Uint16, data_file: "l.raw".into() };
        let back = io::decode_labels(&header, &io::encode_labels(&labels)).unwrap();
        prop_assert_eq!(back, labels);
    }

    #[test]
    fn truncated_payloads_are_rejected(grid in small_grid(), cut in 1usize..8) {
        let vol = Volume::from_fn(grid, |x, _, _| x as f64);
        let header = MetaHeader { grid, channels: 1, element_type: ElementType::Float32, data_file: "v.raw".into() };
        let bytes = io::encode_volume(&vol);
        prop_assert!(io::decode_volume(&header, &bytes[..bytes.len() - cut.min(bytes.len())]).is_err());
    }

    #[test]
    fn parsers_never_panic(text in "[a-z_.= 0-9\n#-]{0,120}") {
        let _ = MetaHeader::parse(&text);
        let _ = RegistrationConfig::parse(&text);
        let _ = PhantomSpec::parse(&text);
    }

    #[test]
    fn negated_velocity_inverts_the_map(k in prop::array::uniform3(0.1f64..0.6), amp in 0.0f64..0.3) {
        let grid = Grid::with_dims([10; 3]).unwrap();
        let v = wave(grid, k, amp);
        let fwd = exp_svf(&v, DEFAULT_STEPS);
        let back = exp_svf(&VelocityField(v.0.scaled(-1.0)), DEFAULT_STEPS);
        let round = compose(&fwd, &back).unwrap();
        for i in 0..grid.len() {
            let c = grid.coords(i);
            if c.iter().any(|&x| !(2..8).contains(&x)) {
                continue;
            }
            let p = grid.point(i);
            let q = round.map_index(i);
            for a in 0..3 {
                prop_assert!((q[a] - p[a]).abs() < 2e-2, "{:?} vs {:?}", q, p);
            }
        }
        prop_assert_eq!(folding_count(&fwd), 0);
    }

    #[test]
    fn rigid_maps_keep_rigid_dsc_at_one(
        axis in prop::array::uniform3(-1.0f64..1.0),
        angle in -0.3f64..0.3,
        shift in prop::array::uniform3(-1.5f64..1.5),
    ) {
        prop_assume!(axis.iter().map(|a| a * a).sum::<f64>() > 1e-2);
        let grid = Grid::with_dims([20; 3]).unwrap();
        let labels = LabelVolume::from_fn(grid, |x, y, z| u16::from((6..14).contains(&x) && (5..15).contains(&y) && (7..12).contains(&z)));
        let motion = RigidTransform::about([9.5; 3], axis, angle, shift);
        let phi = DisplacementField::from_map(grid, |p| motion.apply(p));
        prop_assert!(rigid_dsc(&labels, 1, &phi).unwrap() > 0.999);
        prop_assert!(rigidity::oc_loss(&labels, &phi).unwrap().0 < 1e-9);
    }
}
