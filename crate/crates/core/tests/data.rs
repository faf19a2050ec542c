use paf_core::data::{
    encode_idx_images, encode_idx_labels, gaussian_blobs, load_idx, separable_halfspace, two_moons, Dataset,
};
use paf_core::Error;
use proptest::prelude::*;

fn in_range(d: &Dataset) -> bool {
    d.x.data().iter().all(|v| (0.0..=1.0).contains(v)) && d.y.iter().all(|&y| y < d.classes)
}

fn csv_bytes(d: &Dataset) -> Vec<u8> {
    let mut buf = Vec::new();
    d.write_csv(&mut buf).unwrap();
    buf
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn moons_are_pure_and_bounded(half in 1usize..100, noise in 0.0..0.5f64, seed in any::<u64>()) {
        let a = two_moons(2 * half, noise, seed).unwrap();
        prop_assert!(in_range(&a));
        prop_assert_eq!(a.class_counts(), vec![half, half]);
        prop_assert_eq!(csv_bytes(&a), csv_bytes(&two_moons(2 * half, noise, seed).unwrap()));
    }

    #[test]
    fn blobs_are_pure_and_bounded(n in 1usize..200, sigma in 0.0..0.3f64, seed in any::<u64>()) {
        let centers = vec![vec![0.2, 0.3], vec![0.8, 0.5], vec![0.5, 0.9]];
        let a = gaussian_blobs(n, &centers, sigma, seed).unwrap();
        prop_assert!(in_range(&a));
        let counts = a.class_counts();
        prop_assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        prop_assert_eq!(csv_bytes(&a), csv_bytes(&gaussian_blobs(n, &centers, sigma, seed).unwrap()));
    }

    #[test]
    fn halfspace_respects_its_margin(n in 1usize..100, dim in 1usize..6, margin in 0.0..0.4f64, seed in any::<u64>()) {
        let a = separable_halfspace(n, dim, margin, seed).unwrap();
        prop_assert!(in_range(&a));
        for (row, &y) in a.x.data().chunks(dim).zip(&a.y) {
            let s = row[0] - 0.5;
            prop_assert!(s.abs() >= margin && (s > 0.0) == (y == 1));
        }
    }
}

#[test]
fn idx_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let images = vec![vec![0u8, 255, 128, 7], vec![1, 2, 3, 254]];
    let (ip, lp) = (dir.path().join("img.idx"), dir.path().join("lbl.idx"));
    std::fs::write(&ip, encode_idx_images(&images, 2, 2)).unwrap();
    std::fs::write(&lp, encode_idx_labels(&[3, 9])).unwrap();
    let d = load_idx(&ip, &lp).unwrap();
    assert_eq!(d.x.shape(), &[2, 1, 2, 2]);
    assert_eq!(d.y, vec![3, 9]);
    assert_eq!(d.x.data()[1], 1.0);
    for (v, &p) in d.x.data().iter().zip(images.concat().iter()) {
        assert_eq!(*v, p as f64 / 255.0);
    }

    // swapping the files hits the magic check on both sides
    assert!(matches!(load_idx(&lp, &ip), Err(Error::BadMagic { .. })));
    let mut short = encode_idx_images(&images, 2, 2);
    short.truncate(short.len() - 1);
    std::fs::write(&ip, short).unwrap();
    assert!(matches!(load_idx(&ip, &lp), Err(Error::Truncated { .. })));
    assert!(matches!(load_idx(&dir.path().join("absent"), &lp), Err(Error::Read { .. })));
}
