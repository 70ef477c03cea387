mod common;

use common::{check_many, family_case, op_case, FAMILIES, OPS};

#[test]
fn every_op_matches_finite_differences() {
    for (i, op) in OPS.iter().enumerate() {
        let (fails, worst) = check_many(25, 100 + i as u64, |rng| Ok(op_case(op, rng))).unwrap();
        assert_eq!(fails, 0, "{op}: worst tolerance ratio {worst}");
    }
}

#[test]
fn every_family_matches_finite_differences() {
    for (i, fam) in FAMILIES.iter().enumerate() {
        let (fails, worst) = check_many(10, 500 + i as u64, |rng| family_case(fam, rng)).unwrap();
        assert_eq!(fails, 0, "{fam}: worst tolerance ratio {worst}");
    }
}
