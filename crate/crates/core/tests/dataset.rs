use sha2::{Digest, Sha256};

use segcam::data::{self, DatasetSpec, NUM_CLASSES};
use segcam::pnm;

fn digest(samples: &[data::Sample]) -> Vec<u8> {
    let mut h = Sha256::new();
    for s in samples {
        h.update(pnm::write_ppm(&s.image).unwrap());
        h.update(pnm::write_pgm(&s.mask));
    }
    h.finalize().to_vec()
}

#[test]
fn class_statistics_at_desk_scale() {
    let samples = data::generate(&DatasetSpec { seed: 1, count: 200, size: 64 }).unwrap();
    let mut totals = [0usize; NUM_CLASSES];
    let mut present = [0usize; NUM_CLASSES];
    for s in &samples {
        assert!(s.mask.ids().iter().all(|&c| (c as usize) < NUM_CLASSES));
        for (c, n) in s.mask.histogram(NUM_CLASSES).into_iter().enumerate() {
            totals[c] += n;
            present[c] += usize::from(n > 0);
        }
    }
    let all: usize = totals.iter().sum();
    assert_eq!(all, 200 * 64 * 64);
    assert!(totals[0] * 2 > all, "background {} of {all}", totals[0]);
    for (c, &p) in present.iter().enumerate().skip(1) {
        assert!(p >= 160, "class {c} present in {p}/200");
    }
}

#[test]
fn seeds_select_distinct_datasets() {
    let spec = |seed| DatasetSpec { seed, count: 8, size: 32 };
    let a = digest(&data::generate(&spec(1)).unwrap());
    let b = digest(&data::generate(&spec(2)).unwrap());
    let again = digest(&data::generate(&spec(1)).unwrap());
    assert_ne!(a, b);
    assert_eq!(a, again);
}

#[test]
fn samples_do_not_depend_on_count() {
    let few = data::generate(&DatasetSpec { seed: 5, count: 3, size: 32 }).unwrap();
    let many = data::generate(&DatasetSpec { seed: 5, count: 10, size: 32 }).unwrap();
    assert_eq!(few[..], many[..3]);
}

#[test]
fn image_shape_and_range() {
    let s = data::generate_sample(&DatasetSpec { seed: 3, count: 1, size: 48 }, 0).unwrap();
    assert_eq!(s.image.dims(), &[1, 3, 48, 48]);
    assert_eq!((s.mask.height(), s.mask.width()), (48, 48));
    assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn invalid_specs_are_rejected() {
    assert!(data::generate(&DatasetSpec { seed: 0, count: 0, size: 64 }).is_err());
    assert!(data::generate(&DatasetSpec { seed: 0, count: 1, size: 4 }).is_err());
}
