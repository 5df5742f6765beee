mod common;

use clinembed::hybrid::{concat_embeddings, cosine, read_store, write_store, EmbeddingStore};
use clinembed::Error;
use common::*;
use proptest::prelude::*;

#[test]
fn hybrid_cosine_is_mean_of_component_cosines() {
    let (gap, dims_ok) = hybrid_cosine_gap(100, 6);
    assert!(gap <= 1e-6, "{gap}");
    assert!(dims_ok);
}

fn store_strategy(name: &'static str, n: usize) -> impl Strategy<Value = EmbeddingStore> {
    (1usize..12).prop_flat_map(move |d| {
        prop::collection::vec(prop::collection::vec(0.05f32..4.0, d), n).prop_map(move |rows| {
            let ids = (0..n).map(|i| format!("id{i}")).collect();
            EmbeddingStore::from_rows(name, d, ids, rows).unwrap()
        })
    })
}

fn cos_matrix(s: &EmbeddingStore) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0..s.len() {
        for j in 0..s.len() {
            out.push(cosine(s.row(i), s.row(j)).unwrap());
        }
    }
    out
}

proptest! {
    #[test]
    fn normalized_rows_have_norm_sqrt_two((a, b) in (store_strategy("a", 4), store_strategy("b", 4))) {
        let h = concat_embeddings(&a, &b, true).unwrap();
        for row in h.rows() {
            let n = row.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            prop_assert!((n - 2f64.sqrt()).abs() <= 1e-6);
        }
    }

    #[test]
    fn order_swap_preserves_pairwise_cosines((a, b) in (store_strategy("a", 5), store_strategy("b", 5))) {
        let ab = concat_embeddings(&a, &b, true).unwrap();
        let ba = concat_embeddings(&b, &a, true).unwrap();
        prop_assert_eq!(ab.name(), "a+b");
        prop_assert_eq!(ba.name(), "b+a");
        for (x, y) in cos_matrix(&ab).iter().zip(cos_matrix(&ba)) {
            prop_assert!((x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn store_files_round_trip_bit_exactly(s in store_strategy("emb", 3)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.emb");
        write_store(&s, &path).unwrap();
        let back = read_store(&path).unwrap();
        let bits = |s: &EmbeddingStore| s.matrix().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back), bits(&s));
        prop_assert_eq!(back.ids(), s.ids());
        prop_assert_eq!(std::fs::read(&path).unwrap(), s.to_bytes().unwrap());
    }
}

#[test]
fn store_layout_is_little_endian_and_exact() {
    let s = EmbeddingStore::new("m", 2, vec!["a".into(), "bc".into()], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
    let bytes = s.to_bytes().unwrap();
    let mut want = b"EMBD".to_vec();
    for v in [1u32, 2, 2] {
        want.extend(v.to_le_bytes());
    }
    want.extend(1u16.to_le_bytes());
    want.extend(b"m");
    want.extend(1u16.to_le_bytes());
    want.extend(b"a");
    want.extend(2u16.to_le_bytes());
    want.extend(b"bc");
    for v in [1.0f32, -2.0, 0.5, 3.0] {
        want.extend(v.to_le_bytes());
    }
    assert_eq!(bytes, want);
}

#[test]
fn truncated_or_padded_stores_are_rejected() {
    let s = EmbeddingStore::new("m", 2, vec!["a".into(), "b".into()], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let bytes = s.to_bytes().unwrap();
    for cut in 0..bytes.len() {
        assert!(matches!(EmbeddingStore::from_bytes(&bytes[..cut]), Err(Error::Format { .. })), "cut {cut}");
    }
    let mut longer = bytes.clone();
    longer.push(0);
    assert!(EmbeddingStore::from_bytes(&longer).is_err());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.emb");
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(read_store(&path).is_err());
}

#[test]
fn invalid_stores_are_refused() {
    assert!(EmbeddingStore::new("m", 1, vec!["a".into(), "a".into()], vec![1.0, 2.0]).is_err());
    assert!(EmbeddingStore::new("m", 1, vec!["a".into()], vec![f32::NAN]).is_err());
    assert!(EmbeddingStore::new("m", 2, vec!["a".into()], vec![1.0]).is_err());
}

#[test]
fn zero_rows_cannot_be_normalized() {
    let a = EmbeddingStore::new("a", 1, vec!["z".into()], vec![0.0]).unwrap();
    assert!(matches!(concat_embeddings(&a, &a, true), Err(Error::Numeric(_))));
}
