use std::sync::OnceLock;

use nalgebra::Vector3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sdfloc::scene::{first_entry, Primitive};
use sdfloc::sdf_map::{Aabb, GradientScheme, MapParams, VoxelIndex};
use sdfloc::SdfMap;

fn cube(half: f64) -> Aabb {
    Aabb::new(Vector3::repeat(-half), Vector3::repeat(half))
}

fn box_scene() -> Vec<Primitive> {
    vec![Primitive::cuboid(Vector3::new(0.1, -0.2, 0.0), Vector3::new(0.8, 0.6, 1.0))]
}

fn box_map() -> &'static SdfMap {
    static MAP: OnceLock<SdfMap> = OnceLock::new();
    MAP.get_or_init(|| SdfMap::build_from_analytic(&box_scene(), MapParams::new(0.05).with_truncation(0.5), cube(2.0)).unwrap())
}

/// The dyadic plane `z = 0.3125` on a 0.0625 grid.
fn plane_map(scheme: GradientScheme) -> SdfMap {
    let mut map = SdfMap::build_from_analytic(
        &[Primitive::plane(Vector3::z(), -0.3125)],
        MapParams::new(0.0625),
        cube(1.0),
    )
    .unwrap();
    map.set_gradient_scheme(scheme);
    map
}

fn sphere_map(scheme: GradientScheme) -> &'static SdfMap {
    static BLENDED: OnceLock<SdfMap> = OnceLock::new();
    static TRILINEAR: OnceLock<SdfMap> = OnceLock::new();
    let cell = match scheme {
        GradientScheme::Blended => &BLENDED,
        GradientScheme::Trilinear => &TRILINEAR,
    };
    cell.get_or_init(|| {
        let mut map = SdfMap::build_from_analytic(
            &[Primitive::sphere(Vector3::zeros(), 1.0)],
            MapParams::new(0.05).with_truncation(1.0),
            cube(2.0),
        )
        .unwrap();
        map.set_gradient_scheme(scheme);
        map
    })
}

#[test]
fn voxel_addressing_round_trips() {
    let map = sphere_map(GradientScheme::Blended);
    let bound = map.voxel_size() * 3f64.sqrt() / 2.0 + 1e-12;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..1_000_000 {
        let p = Vector3::new(rng.random_range(-40.0..40.0), rng.random_range(-40.0..40.0), rng.random_range(-40.0..40.0));
        let index = map.voxel_index(&p);
        let (block, offset) = index.split();
        assert_eq!(VoxelIndex::join(block, offset), index);
        assert!((map.voxel_center(index) - p).norm() <= bound, "{p:?}");
    }
}

#[test]
fn random_rays_hit_the_box_surface() {
    let map = box_map();
    let scene = box_scene();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut hits = 0;
    for _ in 0..500 {
        let dir = loop {
            let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            if v.norm() > 0.1 && v.norm() <= 1.0 {
                break v.normalize();
            }
        };
        let target = Vector3::new(rng.random_range(-0.2..0.4), rng.random_range(-0.4..0.0), rng.random_range(-0.4..0.4));
        let origin = target - dir * 1.4;
        let Some(hit) = map.raycast_zero_crossing(&origin, &dir, 3.0) else {
            continue;
        };
        hits += 1;
        assert!(map.interpolate(&hit.point).unwrap().distance.abs() <= 0.1 * map.voxel_size());
        let exact = first_entry(&scene, &origin, &dir).unwrap();
        assert!((hit.depth - exact).abs() <= map.voxel_size(), "{} vs {exact}", hit.depth);
    }
    assert!(hits >= 450, "{hits} of 500 rays hit");
}

#[test]
fn affine_fields_interpolate_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for scheme in [GradientScheme::Blended, GradientScheme::Trilinear] {
        let map = plane_map(scheme);
        for _ in 0..1000 {
            let p = Vector3::new(rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8), rng.random_range(0.17..0.45));
            let q = map.interpolate(&p).unwrap();
            assert!((q.distance - (p.z - 0.3125)).abs() <= 1e-12);
            assert_eq!(q.gradient, Vector3::z());
        }
    }
}

#[test]
fn gradient_scheme_is_not_serialized() {
    let map = sphere_map(GradientScheme::Trilinear);
    let mut bytes = Vec::new();
    map.write_to(&mut bytes).unwrap();
    let loaded = SdfMap::read_from(&mut bytes.as_slice()).unwrap();
    assert_eq!(loaded.gradient_scheme(), GradientScheme::Blended);
}

fn shell_point() -> impl Strategy<Value = Vector3<f64>> {
    (0.6f64..1.4, -1.0f64..1.0, 0.0f64..std::f64::consts::TAU).prop_map(|(r, c, a)| {
        let s = (1.0 - c * c).sqrt();
        Vector3::new(s * a.cos(), s * a.sin(), c) * r
    })
}

fn unit_direction() -> impl Strategy<Value = Vector3<f64>> {
    (-1.0f64..1.0, 0.0f64..std::f64::consts::TAU).prop_map(|(c, a)| {
        let s = (1.0 - c * c).sqrt();
        Vector3::new(s * a.cos(), s * a.sin(), c)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn shorter_rays_never_hit_farther(
        origin in (-1.9f64..1.9, -1.9f64..1.9, -1.9f64..1.9),
        dir in unit_direction(),
        long in 0.5f64..3.0,
        fraction in 0.0f64..1.0,
    ) {
        let origin = Vector3::new(origin.0, origin.1, origin.2);
        let map = box_map();
        if let Some(near) = map.raycast_zero_crossing(&origin, &dir, long * fraction) {
            let far = map.raycast_zero_crossing(&origin, &dir, long);
            prop_assert!(far.is_some_and(|far| near.depth <= far.depth + 1e-12));
        }
    }

    #[test]
    fn trilinear_gradient_is_the_cell_derivative(p in shell_point()) {
        let map = sphere_map(GradientScheme::Trilinear);
        let h = 1e-5 * map.voxel_size();
        let g = map.interpolate(&p).unwrap().gradient;
        for axis in 0..3 {
            let e = Vector3::ith(axis, h);
            let fd = (map.interpolate(&(p + e)).unwrap().distance - map.interpolate(&(p - e)).unwrap().distance) / (2.0 * h);
            prop_assert!((g[axis] - fd).abs() <= 1e-6 * g.norm().max(1.0), "axis {} {} vs {}", axis, g[axis], fd);
        }
    }

    #[test]
    fn blended_gradient_is_continuous_across_cell_faces(p in shell_point(), axis in 0usize..3) {
        let map = sphere_map(GradientScheme::Blended);
        let vs = map.voxel_size();
        let mut face = p;
        face[axis] = ((p[axis] - map.origin()[axis]) / vs - 0.5).round() * vs + map.origin()[axis] + 0.5 * vs;
        let e = Vector3::ith(axis, 1e-9);
        let below = map.interpolate(&(face - e)).unwrap().gradient;
        let above = map.interpolate(&(face + e)).unwrap().gradient;
        prop_assert!((below - above).norm() <= 1e-6);
    }
}
