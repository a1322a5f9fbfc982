#![allow(dead_code)]

use std::path::Path;

use ribcam::exec::Exec;
use ribcam::network::CamUNetConfig;
use ribcam::phantom::{generate, PhantomSpec};
use ribcam::sampling::{build_cache, plan_samples, CacheManifest, InMemorySource, SamplingConfig};
use ribcam::{CtVolume, FractureMask, Shape3};

/// Phantom `index` of a family, renamed `ph{index}`.
pub fn phantom(edge: usize, index: u64, base_seed: u64) -> (CtVolume, FractureMask) {
    let spec = PhantomSpec {
        shape: Shape3::cube(edge),
        seed: base_seed + index,
        // thin ribs at small sizes cannot hold 300-voxel fractures
        fracture_size_range: if edge < 192 { (60, 2000) } else { (300, 2000) },
        ..PhantomSpec::default()
    };
    let (v, m) = generate(&spec).expect("phantom");
    (
        CtVolume {
            id: format!("ph{index}"),
            ..v
        },
        m,
    )
}

/// Sample and cache patches from `n` phantoms.
pub fn phantom_cache(
    out: &Path,
    n: u64,
    phantom_edge: usize,
    patch_edge: usize,
    seed: u64,
) -> (CacheManifest, InMemorySource) {
    let cfg = SamplingConfig {
        patch_edge,
        jitter: patch_edge / 8,
        ..SamplingConfig::default()
    };
    let mut source = InMemorySource::default();
    let mut plans = Vec::new();
    for i in 0..n {
        let (v, m) = phantom(phantom_edge, i, seed * 1000);
        plans.push(plan_samples(&v, &m, &cfg, seed + i).expect("plan"));
        source.insert(v, m);
    }
    let manifest = build_cache(&plans, &source, out, patch_edge, Exec::default()).expect("cache");
    (manifest, source)
}

pub fn tiny_model(edge: usize, classifier: bool) -> CamUNetConfig {
    CamUNetConfig {
        channels: vec![4, 8, 16, 32],
        patch_edge: edge,
        classifier_enabled: classifier,
        ..CamUNetConfig::default()
    }
}
