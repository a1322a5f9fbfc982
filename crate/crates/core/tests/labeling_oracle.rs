use proptest::prelude::*;
use ribcam::components::{label, Connectivity};
use ribcam::Shape3;
use ribcam_oracles::{floodfill_components, partition};

fn field_strategy() -> impl Strategy<Value = ([usize; 3], Vec<bool>)> {
    (1usize..=16, 1usize..=16, 1usize..=16, 0.05f64..0.7).prop_flat_map(|(w, h, d, density)| {
        proptest::collection::vec(proptest::bool::weighted(density), w * h * d).prop_map(move |f| ([w, h, d], f))
    })
}

fn partitions_agree(dims: [usize; 3], field: &[bool], c: Connectivity) {
    let ours = label(field, Shape3(dims), c).unwrap();
    let (theirs, count) = floodfill_components(field, dims, u8::from(c)).unwrap();
    assert_eq!(ours.count, count);
    assert_eq!(partition(&ours.labels), partition(&theirs));
    // raster-order numbering matches too
    assert_eq!(ours.labels, theirs);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(120))]

    #[test]
    fn labeling_matches_flood_fill((dims, field) in field_strategy()) {
        for c in [Connectivity::Six, Connectivity::Eighteen, Connectivity::TwentySix] {
            partitions_agree(dims, &field, c);
        }
    }

    #[test]
    fn coarser_connectivity_merges((dims, field) in field_strategy()) {
        let six = label(&field, Shape3(dims), Connectivity::Six).unwrap();
        let full = label(&field, Shape3(dims), Connectivity::TwentySix).unwrap();
        prop_assert!(full.count <= six.count);
        // every 6-component lies inside one 26-component
        for comp in six.components() {
            let l = full.labels[comp[0]];
            prop_assert!(comp.iter().all(|&i| full.labels[i] == l));
        }
    }
}

#[test]
fn diagonal_chain() {
    let dims = [4, 4, 4];
    let mut f = vec![false; 64];
    for i in 0..4 {
        f[i + 4 * (i + 4 * i)] = true;
    }
    partitions_agree(dims, &f, Connectivity::Six);
    assert_eq!(label(&f, Shape3(dims), Connectivity::Six).unwrap().count, 4);
    assert_eq!(label(&f, Shape3(dims), Connectivity::Eighteen).unwrap().count, 4);
    assert_eq!(label(&f, Shape3(dims), Connectivity::TwentySix).unwrap().count, 1);
}
