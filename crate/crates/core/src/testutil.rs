use crate::features::{generate_world, HashTextEncoder, Split, SyntheticWorld, SyntheticWorldSpec};
use crate::hierarchy::{build_hierarchy, Hierarchy, HierarchyConfig};

pub fn toy_world(n_countries: usize, fanout: usize, images: usize, seed: u64) -> (SyntheticWorld, Hierarchy) {
    let spec = SyntheticWorldSpec {
        n_countries,
        regions_per_country: fanout,
        subregions_per_region: fanout,
        cities_per_subregion: fanout,
        images_per_city: images,
        visual_noise: 0.05,
        seed,
        d_img: 8,
        ..Default::default()
    };
    let world = generate_world(&spec).unwrap();
    let text = HashTextEncoder::new(4, 0);
    let h = build_hierarchy(world.records(Split::Train), HierarchyConfig::default(), None, Some(&text)).unwrap();
    (world, h)
}
