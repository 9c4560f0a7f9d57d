//! Randomized invariants for the numeric core.

use proptest::prelude::*;

use sm3::artifact::{quantize_f32, ArtifactReader, ArtifactWriter};
use sm3::eval;
use sm3::losses;
use sm3::pseudolabel::adjusted_rand_index;
use sm3::tensor::Tensor;

fn finite_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-3.0f64..3.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Cosine similarities are scale invariant, so per-row positive
    /// rescaling never changes the contrastive loss.
    #[test]
    fn nt_xent_row_scale_invariant(
        data1 in finite_vec(4 * 3),
        data2 in finite_vec(4 * 3),
        scales in proptest::collection::vec(0.1f64..10.0, 4),
    ) {
        let z1 = Tensor::matrix(4, 3, data1).unwrap();
        let z2 = Tensor::matrix(4, 3, data2).unwrap();
        prop_assume!(z1.data().chunks(3).all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-6));
        prop_assume!(z2.data().chunks(3).all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-6));
        let base = losses::value::nt_xent(&z1, &z2, 0.5).unwrap();
        let mut scaled = z1.clone();
        for (i, row) in scaled.data_mut().chunks_mut(3).enumerate() {
            for v in row {
                *v *= scales[i];
            }
        }
        let got = losses::value::nt_xent(&scaled, &z2, 0.5).unwrap();
        prop_assert!((base - got).abs() < 1e-9, "base {base}, scaled {got}");
    }

    /// A common orthogonal rotation (Householder reflection) of both
    /// embedding matrices preserves every cosine score, hence all ranks.
    #[test]
    fn pair_match_rotation_invariant(
        d in finite_vec(5 * 4),
        c in finite_vec(5 * 4),
        v in finite_vec(4),
    ) {
        let zd = Tensor::matrix(5, 4, d).unwrap();
        let zc = Tensor::matrix(5, 4, c).unwrap();
        let vnorm: f64 = v.iter().map(|x| x * x).sum();
        prop_assume!(vnorm > 1e-3);
        let rotate = |m: &Tensor| {
            let mut out = Tensor::zeros(vec![5, 4]);
            for i in 0..5 {
                for j in 0..4 {
                    let dot: f64 = (0..4).map(|k| m.get2(i, k) * v[k]).sum();
                    out.set2(i, j, m.get2(i, j) - 2.0 * dot * v[j] / vnorm);
                }
            }
            out
        };
        let base = eval::pair_match(&zd, &zc).unwrap();
        let rot = eval::pair_match(&rotate(&zd), &rotate(&zc)).unwrap();
        for (a, b) in base.ranks.iter().zip(&rot.ranks) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    /// Rank structure only: Acc@1 <= Acc@5 and 1 <= avg_rank <= M.
    #[test]
    fn pair_match_rank_bounds(d in finite_vec(6 * 3), c in finite_vec(6 * 3)) {
        let zd = Tensor::matrix(6, 3, d).unwrap();
        let zc = Tensor::matrix(6, 3, c).unwrap();
        let r = eval::pair_match(&zd, &zc).unwrap();
        prop_assert!(r.acc_at_1 <= r.acc_at_5);
        prop_assert!(r.avg_rank >= 1.0 && r.avg_rank <= 6.0);
    }

    /// AUC depends only on the score ordering, so any strictly increasing
    /// transform leaves it unchanged.
    #[test]
    fn auc_monotone_transform_invariant(
        scores in finite_vec(20),
        labels in proptest::collection::vec(any::<bool>(), 20),
    ) {
        let base = eval::auc(&scores, &labels);
        let transformed: Vec<f64> = scores.iter().map(|&s| 2.0 * s + s * s * s).collect();
        let got = eval::auc(&transformed, &labels);
        prop_assert_eq!(base, got);
    }

    /// Relabeling clusters is a bijection on names, not a different
    /// clustering: ARI must not move.
    #[test]
    fn ari_relabel_invariant(a in proptest::collection::vec(0usize..4, 30)) {
        let b: Vec<usize> = a.iter().map(|&x| (x + 1) % 4).collect();
        let ari_ab = adjusted_rand_index(&a, &b);
        prop_assert!((ari_ab - 1.0).abs() < 1e-12, "relabeled copy must agree perfectly, got {ari_ab}");
    }

    /// f32 storage roundtrips bit for bit once values are quantized.
    #[test]
    fn artifact_roundtrip_bitwise(data in finite_vec(12)) {
        let mut t = Tensor::matrix(3, 4, data).unwrap();
        quantize_f32(&mut t);
        let dir = tempfile::tempdir().unwrap();
        let mut w = ArtifactWriter::new("prop");
        w.add_tensor("t", &t);
        w.write(dir.path(), serde_json::Value::Null).unwrap();
        let r = ArtifactReader::open(dir.path(), "prop").unwrap();
        prop_assert_eq!(r.tensor("t").unwrap(), t);
    }
}
