use crom::config::RunConfig;
use crom::io::{self, NamedMatrix, Role};
use crom_core::basis::{fourier_basis, CoefficientSeries};
use crom_core::galerkin::{fourier_galerkin, Provenance, QuadTerm, QuadraticModel};
use crom_core::kse::{KseParams, SpatioTemporalField};
use crom_core::selection::ModelStructure;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), rows * cols)
        .prop_map(move |v| DMatrix::from_vec(rows, cols, v))
}

fn sized_matrix() -> impl Strategy<Value = DMatrix<f64>> {
    (1usize..6, 2usize..9).prop_flat_map(|(r, c)| matrix(r, c))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn matrices_round_trip(values in sized_matrix(), note in "[ -~]{0,40}") {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.crom");
        let m = NamedMatrix { values, note };
        io::write_matrix(&p, &m).unwrap();
        prop_assert_eq!(io::read_role(&p).unwrap(), Role::Matrix);
        prop_assert_eq!(io::read_matrix(&p).unwrap(), m);
    }

    #[test]
    fn series_round_trip(values in sized_matrix(), t0 in -1e3..1e3f64, dt in 1e-3..1.0f64) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.crom");
        let times: Vec<f64> = (0..values.ncols()).map(|j| t0 + j as f64 * dt).collect();
        let s = CoefficientSeries::new(times, values, "pod-7:abc").unwrap();
        io::write_series(&p, &s).unwrap();
        let back = io::read_series(&p).unwrap();
        prop_assert_eq!(back.times, s.times);
        prop_assert_eq!(back.values, s.values);
        prop_assert_eq!(back.basis_id, s.basis_id);
    }

    #[test]
    fn fields_round_trip(values in (2usize..9, 1usize..5).prop_flat_map(|(r, c)| matrix(r, c)), l in 1.0..100.0f64) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.crom");
        let times: Vec<f64> = (0..values.ncols()).map(|j| j as f64 * 0.5).collect();
        let f = SpatioTemporalField::new(l, times, values).unwrap();
        io::write_field(&p, &f).unwrap();
        let back = io::read_field(&p).unwrap();
        prop_assert_eq!(back.l, f.l);
        prop_assert_eq!(back.times, f.times);
        prop_assert_eq!(back.values, f.values);
    }

    #[test]
    fn models_round_trip(lin in matrix(3, 3), noise in matrix(3, 2), c in prop::collection::vec(-1e3..1e3f64, 3),
                         terms in prop::collection::vec((0usize..3, 0usize..3, 0usize..3, -10.0..10.0f64), 0..8)) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.crom");
        let mut m = QuadraticModel::zero(3, Provenance::Learned);
        m.linear = lin;
        m.noise = noise;
        m.constant = c;
        let mut q: Vec<QuadTerm> = terms.into_iter().map(|(i, j, k, coef)| QuadTerm { i, j: j.min(k), k: j.max(k), coef }).collect();
        q.sort_by_key(|t| (t.i, t.j, t.k));
        q.dedup_by_key(|t| (t.i, t.j, t.k));
        m.quadratic = q;
        io::write_model(&p, &m).unwrap();
        prop_assert_eq!(io::read_model(&p).unwrap(), m);
    }

    #[test]
    fn structures_round_trip(mask in prop::collection::vec(any::<bool>(), 12)) {
        let s = ModelStructure::new(3, 4, mask, "per_equation_sparsity 0.5");
        let m = io::structure_to_matrix(&s);
        let back = io::structure_from_matrix(std::path::Path::new("s"), &m).unwrap();
        prop_assert_eq!(back, s);
    }
}

#[test]
fn galerkin_model_and_basis_files_are_exact() {
    let dir = tempfile::tempdir().unwrap();
    let p = KseParams::default();
    let m = fourier_galerkin(10, &p).unwrap();
    io::write_model(&dir.path().join("g.crom"), &m).unwrap();
    assert_eq!(io::read_model(&dir.path().join("g.crom")).unwrap(), m);
    let b = fourier_basis(10, &p).unwrap();
    io::write_basis(&dir.path().join("b.crom"), &b).unwrap();
    assert_eq!(io::read_basis(&dir.path().join("b.crom")).unwrap(), b);
}

#[test]
fn wrong_role_and_truncation_are_format_errors() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.crom");
    io::write_matrix(&p, &NamedMatrix { values: DMatrix::zeros(2, 2), note: String::new() }).unwrap();
    let err = io::read_series(&p).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("matrix"));

    let bytes = std::fs::read(&p).unwrap();
    std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
    assert_eq!(io::read_matrix(&p).unwrap_err().exit_code(), 2);
}

#[test]
fn writes_leave_no_temporary_files() {
    let dir = tempfile::tempdir().unwrap();
    io::write_text(&dir.path().join("a.txt"), "x").unwrap();
    let names: Vec<String> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    assert_eq!(names, ["a.txt"]);
}

#[test]
fn saved_config_reloads_identically() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = RunConfig::default();
    c.kse.nu = 3.5;
    c.selection.strategy = "largest_gap".into();
    c.selection.params = vec![0.01];
    let p = c.save(dir.path(), "run.toml").unwrap();
    assert_eq!(RunConfig::load(&p).unwrap(), c);
}
