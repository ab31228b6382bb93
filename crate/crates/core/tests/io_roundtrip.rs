mod common;

use distobs::io::{self, GainsFile, ProblemFile};
use distobs::synthesis::{self, synthesize, SynthesisParameters};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![
        prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO,
        Just(f64::MAX),
        Just(f64::MIN_POSITIVE),
        Just(-0.0),
    ]
}

fn matrix() -> impl Strategy<Value = DMatrix<f64>> {
    (1usize..=5, 1usize..=5).prop_flat_map(|(r, c)| {
        prop::collection::vec(finite(), r * c).prop_map(move |v| DMatrix::from_row_slice(r, c, &v))
    })
}

proptest! {
    #[test]
    fn matrices_survive_json_bit_for_bit(m in matrix()) {
        let text = serde_json::to_string(&io::matrix_to_rows(&m)).unwrap();
        let rows: io::Rows = serde_json::from_str(&text).unwrap();
        let back = io::matrix_from_rows(&rows, "M").unwrap();
        prop_assert_eq!(back.shape(), m.shape());
        for (a, b) in back.iter().zip(m.iter()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}

#[test]
fn synthesized_gains_survive_a_file_round_trip() {
    let dir = std::env::temp_dir().join(format!("distobs-io-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let mut rng = common::rng(300);
    for k in 0..40 {
        let inst = common::random_instance(&mut rng);
        let alpha = [0.0, 0.5, 1.0][k % 3];

        let problem_path = dir.join("problem.json");
        io::write_json(&problem_path, &ProblemFile::from_parts(&inst.plant, &inst.graph, alpha)).unwrap();
        let problem = io::read_problem(&problem_path).unwrap();
        assert_eq!(problem.plant, inst.plant);
        assert_eq!(problem.graph, inst.graph);

        let s = synthesize(&problem.plant, &problem.graph, &problem.params).unwrap();
        let file = GainsFile::from_synthesis(&s);
        let gains_path = dir.join("gains.json");
        io::write_json(&gains_path, &file).unwrap();
        let back: GainsFile = io::read_json(&gains_path).unwrap();
        assert_eq!(back, file);
        let real = back.to_realization().unwrap();
        assert_eq!(real, s.realization);

        let report = synthesis::verify_realization(&real, &inst.plant, &inst.graph, None, 1e-9).unwrap();
        assert!(report.all_pass(), "instance {k}: {:?}", report.checks);
    }
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn truncated_gains_are_rejected() {
    let inst = common::standard_instance();
    let s = synthesize(&inst.plant, &inst.graph, &SynthesisParameters::with_alpha(0.5)).unwrap();
    let mut file = GainsFile::from_synthesis(&s);
    file.nodes.pop();
    assert!(file.to_realization().is_err());

    let mut file = GainsFile::from_synthesis(&s);
    file.nodes[0].n_gain[0].pop();
    assert!(file.to_realization().is_err());

    let mut file = GainsFile::from_synthesis(&s);
    file.total_order += 1;
    assert!(file.to_realization().is_err());
}
