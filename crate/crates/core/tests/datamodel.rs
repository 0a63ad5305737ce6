use proptest::prelude::*;
use semsynth::datamodel::{
    build_context, derive_edge_map, enlarge_box, extract_instances, BBox, InstanceMap, Removal, RemovalMode, SemanticMap,
};
use semsynth::raster::{Grid, Raster};
use std::collections::BTreeMap;

fn grid_strategy(h: usize, w: usize, max: u16) -> impl Strategy<Value = Grid<u16>> {
    proptest::collection::vec(0..=max, h * w).prop_map(move |v| Grid::from_vec(h, w, v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn edge_map_matches_neighbour_scan(ids in grid_strategy(16, 16, 3)) {
        let e = derive_edge_map(&InstanceMap::new(ids.clone()));
        for y in 0..16i64 {
            for x in 0..16i64 {
                let v = ids.get(y as usize, x as usize);
                let mut edge = 0u8;
                for (dy, dx) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
                    let (ny, nx) = (y + dy, x + dx);
                    if (0..16).contains(&ny) && (0..16).contains(&nx) && ids.get(ny as usize, nx as usize) != v {
                        edge = 1;
                    }
                }
                prop_assert_eq!(e.edges().get(y as usize, x as usize), edge);
            }
        }
    }

    #[test]
    fn instance_records_match_pixel_accounting(ids in grid_strategy(32, 32, 5), labels in grid_strategy(32, 32, 3)) {
        let recs = extract_instances(&InstanceMap::new(ids.clone()), &SemanticMap::new(labels.clone(), 4).unwrap()).unwrap();
        let mut pixels: BTreeMap<u16, Vec<(usize, usize)>> = BTreeMap::new();
        for y in 0..32 {
            for x in 0..32 {
                let id = ids.get(y, x);
                if id != 0 {
                    pixels.entry(id).or_default().push((y, x));
                }
            }
        }
        prop_assert_eq!(recs.len(), pixels.len());
        for (rec, (id, px)) in recs.iter().zip(&pixels) {
            prop_assert_eq!(rec.instance_id, *id);
            prop_assert_eq!(rec.area, px.len());
            let y0 = px.iter().map(|p| p.0).min().unwrap() as i64;
            let y1 = px.iter().map(|p| p.0).max().unwrap() as i64 + 1;
            let x0 = px.iter().map(|p| p.1).min().unwrap() as i64;
            let x1 = px.iter().map(|p| p.1).max().unwrap() as i64 + 1;
            prop_assert_eq!(rec.tight_box, BBox { x0, y0, x1, y1 });
            prop_assert_eq!(rec.mask.count(), px.len());
            let mut votes = [0usize; 4];
            for &(y, x) in px {
                votes[labels.get(y, x) as usize] += 1;
            }
            let best = *votes.iter().max().unwrap();
            let majority = votes.iter().position(|&v| v == best).unwrap() as u16;
            prop_assert_eq!(rec.class_id, majority);
        }
    }

    #[test]
    fn padded_crop_is_a_pixel_gather(
        x0 in -6i64..10, y0 in -6i64..10, w in 1i64..12, h in 1i64..12, seed in 0u32..1000,
    ) {
        let img = Raster::from_fn(8, 8, 2, |y, x, c| (seed as f32) + (y * 16 + x * 2 + c) as f32);
        let b = BBox { x0, y0, x1: x0 + w, y1: y0 + h };
        let out = img.crop_with_padding(&b, -1.0);
        prop_assert_eq!(out.dims(), (h as usize, w as usize));
        for yy in 0..h {
            for xx in 0..w {
                let (sy, sx) = (y0 + yy, x0 + xx);
                for c in 0..2 {
                    let want = if (0..8).contains(&sy) && (0..8).contains(&sx) { img.get(sy as usize, sx as usize, c) } else { -1.0 };
                    prop_assert_eq!(out.get(yy as usize, xx as usize, c), want);
                }
            }
        }
    }

    #[test]
    fn enlarged_box_keeps_centre(x0 in -20i64..20, y0 in -20i64..20, w in 1i64..40, h in 1i64..40, f in 1.0f64..4.0) {
        let b = BBox { x0, y0, x1: x0 + w, y1: y0 + h };
        let e = enlarge_box(&b, f).unwrap();
        prop_assert_eq!(e.width(), (f * w as f64).round() as i64);
        prop_assert_eq!(e.height(), (f * h as f64).round() as i64);
        let (cx, cy) = b.center();
        let (ex, ey) = e.center();
        prop_assert!((cx - ex).abs() <= 0.5 && (cy - ey).abs() <= 0.5);
    }
}

#[test]
fn context_tight_region_is_central_half() {
    // Even-sized boxes make the doubling exact.
    for (x0, y0, side) in [(10usize, 12usize, 8usize), (0, 0, 16), (40, 30, 24), (48, 48, 16)] {
        let ids = Grid::from_fn(64, 64, |y, x| ((y0..y0 + side).contains(&y) && (x0..x0 + side).contains(&x)) as u16);
        let ins = InstanceMap::new(ids.clone());
        let sem = SemanticMap::new(ids, 2).unwrap();
        let rec = extract_instances(&ins, &sem).unwrap().remove(0);
        let img = Raster::filled(64, 64, 3, 0.5);
        for target in [32usize, 64, 128] {
            let ctx = build_context(&img, &sem, &ins, &rec, Removal::for_model(RemovalMode::ZeroMask, target / 2), target).unwrap();
            let t = target as i64;
            assert_eq!(ctx.tight_box_in_context, BBox { x0: t / 4, y0: t / 4, x1: 3 * t / 4, y1: 3 * t / 4 });
            for y in 0..target {
                for x in 0..target {
                    let inside = (target / 4..3 * target / 4).contains(&y) && (target / 4..3 * target / 4).contains(&x);
                    assert_eq!(ctx.context_mask.get(y, x), inside);
                    if inside {
                        assert_eq!(ctx.context_image.get(y, x, 0), 0.0);
                    }
                }
            }
        }
    }
}

#[test]
fn blur_removal_leaves_unmasked_pixels() {
    let ids = Grid::from_fn(32, 32, |y, x| ((8..24).contains(&y) && (8..24).contains(&x)) as u16);
    let ins = InstanceMap::new(ids.clone());
    let sem = SemanticMap::new(ids, 2).unwrap();
    let rec = extract_instances(&ins, &sem).unwrap().remove(0);
    let img = Raster::from_fn(32, 32, 3, |y, x, c| ((y * 7 + x * 3 + c) % 11) as f32 / 10.0);
    let zero = build_context(&img, &sem, &ins, &rec, Removal::for_model(RemovalMode::ZeroMask, 16), 32).unwrap();
    let blur = build_context(&img, &sem, &ins, &rec, Removal::for_model(RemovalMode::Blur, 16), 32).unwrap();
    for y in 0..32 {
        for x in 0..32 {
            if !zero.context_mask.get(y, x) {
                assert_eq!(zero.context_image.pixel(y, x), blur.context_image.pixel(y, x));
            }
        }
    }
}
