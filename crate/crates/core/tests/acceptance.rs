//! End-to-end acceptance criteria. Each test prints one PASS or FAIL line
//! straight to stdout so the lines survive output capture.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::panic::AssertUnwindSafe;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::*;
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use tilevault::cutter::{self, CutOptions, Verdict};
use tilevault::gazetteer::{Gazetteer, MatchRank};
use tilevault::grid::{
    self, standard_themes, GeoBox, GeoCoord, Resolution, SceneId, Theme, ThemeId, TileAddress, UtmCoord,
    TILE_PIXELS,
};
use tilevault::jobs::JobsConfig;
use tilevault::raster::{self, Raster};
use tilevault::scaler;
use tilevault::server::{self, AppState};
use tilevault::store::{integrity_scan, Store};

fn criterion(name: &str, limit: Option<Duration>, body: impl FnOnce() -> String) {
    let t = Instant::now();
    let r = std::panic::catch_unwind(AssertUnwindSafe(body));
    let elapsed = t.elapsed();
    let line = match &r {
        Ok(_) if limit.is_some_and(|l| elapsed > l) => {
            format!("FAIL {name}: took {:.1}s, limit {}s\n", elapsed.as_secs_f64(), limit.unwrap().as_secs())
        }
        Ok(detail) => format!("PASS {name} ({detail}; {:.1}s)\n", elapsed.as_secs_f64()),
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            format!("FAIL {name}: {msg}\n")
        }
    };
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
    match r {
        Err(e) => std::panic::resume_unwind(e),
        Ok(_) => assert!(limit.is_none_or(|l| elapsed <= l), "{name} over its time limit"),
    }
}

fn theme(id: u16) -> Theme {
    standard_themes().into_iter().find(|t| t.id == ThemeId(id)).unwrap()
}

fn scale_theme(store: &Store, id: u16) -> usize {
    scaler::run_pending(store, ThemeId(id), None, "acceptance", &JobsConfig::default()).unwrap()
}

fn cut(store: &Store, manifest: &Path) -> cutter::CutReport {
    cutter::cut_manifest(store, manifest, &CutOptions::default()).unwrap()
}

fn decode(blob: &[u8]) -> Raster {
    raster::decode_tile(blob).unwrap()
}

#[test]
fn grid_formula_table() {
    criterion("grid formula table", None, || {
        let mut levels = 0;
        for exp in -10..=12 {
            let m = 2f64.powi(exp);
            let oracle = (m.log2() + 10.0).round() as i32;
            let res = Resolution::from_meters(m).unwrap();
            let sc = grid::scale_of_resolution(res);
            assert_eq!(sc.level() as i32, oracle, "{m} m");
            assert_eq!(grid::resolution_of_scale(sc).meters(), m);
            assert_eq!(res.tile_meters(), m * TILE_PIXELS as f64);
            levels += 1;
        }
        assert_eq!(levels, 23);
        assert_eq!(grid::scale_of_resolution(Resolution::from_meters(1.0 / 1024.0).unwrap()).level(), 0);
        assert_eq!(grid::scale_of_resolution(Resolution::from_meters(4096.0).unwrap()).level(), 22);
        assert_eq!(grid::Scale::all().count(), 23);
        format!("{levels} levels")
    });
}

#[test]
fn worked_key() {
    criterion("worked key", None, || {
        let doq = theme(1);
        let (e, n): (f64, f64) = (553200.0, 4182600.0);
        let tile_m: f64 = 200.0;
        let oracle = TileAddress::new(ThemeId(1), s(10), SceneId(10), (e / tile_m) as u32, (n / tile_m).ceil() as u32);
        let addr = grid::tile_from_utm(UtmCoord::new(10, e, n).unwrap(), &doq, s(10)).unwrap();
        assert_eq!(addr, oracle);
        assert_eq!(addr, TileAddress::new(ThemeId(1), s(10), SceneId(10), 2766, 20913));
        assert_eq!(addr.query_string(), "T=1&S=10&Z=10&X=2766&Y=20913");
        let back = grid::utm_of_tile(addr, &doq).unwrap();
        assert_eq!((back.zone, back.easting, back.northing), (10, e, n));
        addr.query_string()
    });
}

#[test]
fn alignment_cross_theme() {
    criterion("alignment cross-theme", Some(Duration::from_secs(60)), || {
        let d = tempfile::tempdir().unwrap();
        let store = quick_store(&d.path().join("store"));
        let (left, top) = (553250.0, 4182550.0);
        // One ground value per 2 m cell, seen at 1 m by one theme and at 2 m by the other.
        let cell = |i: u32, j: u32| (ground(i as i64, j as i64) % 12) as u8;
        let doq_img = gray_image(700, 700, |x, y| cell(x / 2, y / 2) * 19);
        write_pgm(d.path(), "doq.pgm", &doq_img);
        let mut palette = vec![[255u8; 3]];
        palette.extend((0..12u8).map(|k| [k * 19; 3]));
        let drg_px: Vec<u8> = (0..350 * 350).map(|i| cell(i % 350, i / 350) + 1).collect();
        let drg_img = Raster::indexed(350, 350, palette.clone(), 0, drg_px).unwrap();
        write_png(d.path(), "drg.png", &drg_img);
        let m1 = write_manifest(d.path(), "doq.json", "DOQ-A", 1, "projected", vec![projected_image("doq.pgm", 1.0, 10, left, top)], None);
        let mut entry = projected_image("drg.png", 2.0, 10, left, top);
        entry["format"] = "png-indexed".into();
        let m2 = write_manifest(d.path(), "drg.json", "DRG-A", 2, "projected", vec![entry], None);
        cut(&store, &m1);
        cut(&store, &m2);
        scale_theme(&store, 1);

        let (doq, drg) = (theme(1), theme(2));
        let drg_tiles: Vec<_> = store.visible_infos(ThemeId(2)).into_iter().map(|i| i.address).collect();
        let doq_tiles: BTreeSet<(u32, u32)> = store
            .visible_infos(ThemeId(1))
            .into_iter()
            .filter(|i| i.address.scale == s(11))
            .map(|i| (i.address.x, i.address.y))
            .collect();
        assert!(!drg_tiles.is_empty());
        assert_eq!(drg_tiles.iter().map(|a| (a.x, a.y)).collect::<BTreeSet<_>>(), doq_tiles);
        let mut pixels = 0;
        for a in &drg_tiles {
            assert_eq!(a.scale, s(11));
            let b = TileAddress::new(ThemeId(1), s(11), a.scene, a.x, a.y);
            let ua = grid::utm_of_tile(*a, &drg).unwrap();
            let ub = grid::utm_of_tile(b, &doq).unwrap();
            assert_eq!((ua.zone, ua.easting, ua.northing), (ub.zone, ub.easting, ub.northing));
            let r2 = decode(&store.get_visible_tile(a).unwrap().unwrap());
            let r1 = decode(&store.get_visible_tile(&b).unwrap().unwrap());
            for (p1, p2) in r1.pixels().iter().zip(r2.pixels()) {
                assert_eq!(*p1, palette[*p2 as usize][0], "ground misaligned in tile {a:?}");
            }
            pixels += r1.pixels().len();
        }
        format!("{} tile pairs, {pixels} pixels", drg_tiles.len())
    });
}

#[test]
fn mosaic_fidelity() {
    criterion("mosaic fidelity", Some(Duration::from_secs(60)), || {
        let d = tempfile::tempdir().unwrap();
        let mut rng = StdRng::seed_from_u64(0x5eed_0001);
        let (left, top) = (553237.0, 4182571.0);
        let scene = gray_image(1600, 1600, |x, y| ground(x as i64 + 37, y as i64 + 11));
        write_pgm(d.path(), "scene.pgm", &scene);
        let whole = write_manifest(d.path(), "whole.json", "WHOLE", 1, "projected", vec![projected_image("scene.pgm", 1.0, 10, left, top)], None);
        let golden = {
            let store = quick_store(&d.path().join("golden"));
            cut(&store, &whole);
            visible_blobs(&store, ThemeId(1))
        };
        let (sx, sy) = (rng.random_range(600..1000u32), rng.random_range(600..1000u32));
        let (ox, oy) = (rng.random_range(50..300u32), rng.random_range(50..300u32));
        let parts: Vec<(u32, u32, u32, u32)> = vec![
            (0, 0, sx + ox, sy + oy),
            (sx, 0, 1600 - sx, sy + oy),
            (0, sy, sx + ox, 1600 - sy),
            (sx, sy, 1600 - sx, 1600 - sy),
        ];
        let manifests: Vec<_> = parts
            .iter()
            .enumerate()
            .map(|(i, &(x, y, w, h))| {
                let f = format!("part{i}.pgm");
                write_pgm(d.path(), &f, &scene.crop(x as i64, y as i64, w, h));
                let img = projected_image(&f, 1.0, 10, left + x as f64, top - y as f64);
                write_manifest(d.path(), &format!("part{i}.json"), &format!("PART-{i}"), 1, "projected", vec![img], None)
            })
            .collect();
        let mut orders = vec![];
        for run in 0..3 {
            let mut order: Vec<usize> = (0..4).collect();
            order.shuffle(&mut rng);
            let store = quick_store(&d.path().join(format!("run{run}")));
            for &i in &order {
                cut(&store, &manifests[i]);
            }
            assert_eq!(visible_blobs(&store, ThemeId(1)), golden, "order {order:?}");
            orders.push(format!("{order:?}"));
        }
        format!("{} tiles, orders {}", golden.len(), orders.join(" "))
    });
}

#[test]
fn decision_table_conformance() {
    criterion("decision-table conformance", None, || {
        let mut rng = StdRng::seed_from_u64(0x5eed_0002);
        let full = constant_tile(40);
        let mut holed = constant_tile(40);
        holed.set(3, 3, 255);
        let b = raster::blankness;
        assert_eq!(cutter::decide(b(&full), None), Verdict::InsertVisible);
        assert_eq!(cutter::decide(b(&holed), None), Verdict::InsertVisible);
        assert_eq!(cutter::decide(b(&full), Some(b(&holed))), Verdict::ReplaceOld);
        assert_eq!(cutter::decide(b(&full), Some(b(&full))), Verdict::ReplaceOld);
        assert_eq!(cutter::decide(b(&holed), Some(b(&full))), Verdict::DiscardNew);
        assert_eq!(cutter::decide(b(&holed), Some(b(&holed))), Verdict::MergeThenReplace);

        // Tile pairs built from aligned 200 px images, one tile per verdict.
        let d = tempfile::tempdir().unwrap();
        let store = quick_store(&d.path().join("store"));
        let mut tile = |salt: i64, holes: bool| {
            let mask: Vec<bool> = (0..TILE_PIXELS * TILE_PIXELS).map(|_| holes && rng.random_bool(0.3)).collect();
            gray_image(TILE_PIXELS, TILE_PIXELS, |x, y| {
                if mask[(y * TILE_PIXELS + x) as usize] { 255 } else { ground(x as i64 + salt, y as i64) }
            })
        };
        let old = [None, Some(tile(1, false)), Some(tile(2, false)), Some(tile(3, true))];
        let new = [tile(10, true), tile(11, false), tile(12, true), tile(13, true)];
        let entry = |name: &str, i: usize| projected_image(name, 1.0, 10, 553200.0 + 200.0 * i as f64, 4182600.0);
        let mut olds = vec![];
        let mut news = vec![];
        for i in 0..4 {
            if let Some(r) = &old[i] {
                write_pgm(d.path(), &format!("old{i}.pgm"), r);
                olds.push(entry(&format!("old{i}.pgm"), i));
            }
            write_pgm(d.path(), &format!("new{i}.pgm"), &new[i]);
            news.push(entry(&format!("new{i}.pgm"), i));
        }
        let ma = write_manifest(d.path(), "old.json", "OLD", 1, "projected", olds, None);
        let mb = write_manifest(d.path(), "new.json", "NEW", 1, "projected", news, None);
        cut(&store, &ma);
        let before = visible_seqs(&store, ThemeId(1));
        let rep = cut(&store, &mb);
        assert_eq!((rep.tiles.written, rep.tiles.discarded), (3, 1));

        let at = |i: usize| doq(10, 2766 + i as u32, 20913);
        let got = |i: usize| decode(&store.get_visible_tile(&at(i)).unwrap().unwrap());
        assert_eq!(got(0), new[0], "insert visible");
        assert_eq!(got(1), new[1], "replace old");
        assert_eq!(got(2), *old[2].as_ref().unwrap(), "discard new");
        assert_eq!(store.visible_info(&at(2)).unwrap().insert_seq, before[&at(2)]);
        let old3 = old[3].as_ref().unwrap();
        let oracle: Vec<u8> = new[3].pixels().iter().zip(old3.pixels()).map(|(&n, &o)| if n == 255 { o } else { n }).collect();
        assert_eq!(got(3).pixels(), &oracle[..], "merge");
        assert!(oracle.contains(&255), "some pixels blank in both");

        // Paletted merges against the same oracle, blank index chosen at random.
        let mut merges = 1;
        for _ in 0..100 {
            let blank = rng.random_range(0..13u8);
            let palette: Vec<[u8; 3]> = (0..13u8).map(|i| [i, i, i]).collect();
            let px = |rng: &mut StdRng| (0..64 * 64).map(|_| rng.random_range(0..13u8)).collect::<Vec<_>>();
            let (pn, po) = (px(&mut rng), px(&mut rng));
            let n = Raster::indexed(64, 64, palette.clone(), blank, pn.clone()).unwrap();
            let o = Raster::indexed(64, 64, palette, blank, po.clone()).unwrap();
            let m = raster::merge_prefer_nonblank(&n, &o).unwrap();
            let want: Vec<u8> = pn.iter().zip(&po).map(|(&a, &b)| if a == blank { b } else { a }).collect();
            assert_eq!(m.pixels(), &want[..]);
            merges += 1;
        }
        format!("4 verdicts, {merges} merges")
    });
}

/// Child tiles of `a` with their pixel offsets in the parent, from the
/// top-left anchored layout.
fn child_blocks(a: TileAddress) -> [(TileAddress, u32, u32); 4] {
    let below = |s: grid::Scale| grid::Scale::new(s.level() as i32 - 1).unwrap();
    let c = |x: u32, y: u32| TileAddress::new(a.theme, below(a.scale), a.scene, x, y);
    let half = TILE_PIXELS / 2;
    [
        (c(2 * a.x, 2 * a.y), 0, 0),
        (c(2 * a.x + 1, 2 * a.y), half, 0),
        (c(2 * a.x, 2 * a.y - 1), 0, half),
        (c(2 * a.x + 1, 2 * a.y - 1), half, half),
    ]
}

/// Checks every derived pixel against its four source pixels; returns the
/// number of pixels checked.
fn check_derived_pixels(store: &Store, derived: &BTreeMap<TileAddress, Vec<u8>>) -> usize {
    let mut checked = 0;
    for (a, blob) in derived {
        let r = decode(blob);
        let kids: Vec<Option<Raster>> = child_blocks(*a)
            .iter()
            .map(|(c, _, _)| store.get_visible_tile(c).unwrap().map(|b| decode(&b)))
            .collect();
        let exact = raster::downsample_2x2([kids[0].as_ref(), kids[1].as_ref(), kids[2].as_ref(), kids[3].as_ref()]).unwrap();
        assert_eq!(r, exact, "{a:?} differs from downsample_2x2");
        for (k, &(_, ox, oy)) in child_blocks(*a).iter().enumerate() {
            for j in 0..TILE_PIXELS / 2 {
                for i in 0..TILE_PIXELS / 2 {
                    let v = r.get(ox + i, oy + j) as f64;
                    let mean = match &kids[k] {
                        None => 255.0,
                        Some(c) => {
                            let s: u32 = [(0, 0), (1, 0), (0, 1), (1, 1)]
                                .iter()
                                .map(|&(dx, dy)| c.get(2 * i + dx, 2 * j + dy) as u32)
                                .sum();
                            s as f64 / 4.0
                        }
                    };
                    assert!((v - mean).abs() <= 0.5, "{a:?} pixel ({},{}) = {v}, mean {mean}", ox + i, oy + j);
                    checked += 1;
                }
            }
        }
    }
    checked
}

#[test]
fn pyramid_consistency() {
    criterion("pyramid consistency", Some(Duration::from_secs(300)), || {
        let d = tempfile::tempdir().unwrap();
        let mut rng = StdRng::seed_from_u64(0x5eed_0003);
        let (mut tiles, mut pixels) = (0, 0);
        for run in 0..20 {
            let store = quick_store(&d.path().join(format!("run{run}")));
            let loads = rng.random_range(2..=5);
            for k in 0..loads {
                let (w, h) = (rng.random_range(100..=450u32), rng.random_range(100..=450u32));
                let (dx, dy) = (rng.random_range(0..1000u32), rng.random_range(0..1000u32));
                let salt = rng.random_range(0..10_000i64);
                let holes = rng.random_bool(0.5);
                let img = gray_image(w, h, |x, y| {
                    let v = ground(x as i64 + salt, y as i64);
                    if holes && v % 13 == 0 { 255 } else { v }
                });
                let f = format!("r{run}l{k}.pgm");
                write_pgm(d.path(), &f, &img);
                let entry = projected_image(&f, 1.0, 10, 553200.0 + dx as f64, 4182600.0 - dy as f64);
                let m = write_manifest(d.path(), &format!("r{run}l{k}.json"), &format!("R{run}L{k}"), 1, "projected", vec![entry], None);
                cut(&store, &m);
                if rng.random_bool(0.5) {
                    scale_theme(&store, 1);
                }
            }
            scale_theme(&store, 1);
            let mut derived = visible_blobs(&store, ThemeId(1));
            derived.retain(|a, _| a.scale > s(10));
            let full: BTreeMap<TileAddress, Vec<u8>> = scaler::compute_full_pyramid(&store, ThemeId(1), SceneId(10))
                .unwrap()
                .into_iter()
                .map(|(a, r)| (a, raster::encode_tile(&r).unwrap()))
                .collect();
            assert_eq!(derived.keys().collect::<Vec<_>>(), full.keys().collect::<Vec<_>>(), "run {run}: tile sets");
            assert!(derived == full, "run {run}: incremental pyramid differs from full rebuild");
            pixels += check_derived_pixels(&store, &derived);
            tiles += derived.len();
        }
        format!("20 interleavings, {tiles} derived tiles, {pixels} pixels")
    });
}

/// Runs two loads, each followed by a scale pass. Returns the index of the
/// step that failed, if any.
fn pipeline(store: &Store, manifests: &[&Path; 2], cfg: &JobsConfig, read: &mut Vec<String>) -> Result<(), usize> {
    let opts = CutOptions { jobs: cfg.clone(), ..Default::default() };
    for (i, m) in manifests.iter().enumerate() {
        let rep = cutter::cut_manifest(store, m, &opts).map_err(|_| 2 * i)?;
        read.extend(rep.files_read);
        scaler::run_pending(store, ThemeId(1), None, "worker", cfg).map_err(|_| 2 * i + 1)?;
    }
    Ok(())
}

#[test]
fn crash_restart() {
    criterion("crash-restart", Some(Duration::from_secs(300)), || {
        let d = tempfile::tempdir().unwrap();
        let mut rng = StdRng::seed_from_u64(0x5eed_0004);
        let a_images: Vec<_> = (0..3)
            .map(|i| {
                let img = gray_image(450, 250, |x, y| ground(x as i64 + 400 * i, y as i64));
                write_pgm(d.path(), &format!("a{i}.pgm"), &img);
                projected_image(&format!("a{i}.pgm"), 1.0, 10, 553200.0 + 400.0 * i as f64, 4182600.0)
            })
            .collect();
        let b_images: Vec<_> = (0..2)
            .map(|i| {
                let img = gray_image(500, 300, |x, y| if (x + y) % 9 == 0 { 255 } else { ground(x as i64, y as i64 + 7) });
                write_pgm(d.path(), &format!("b{i}.pgm"), &img);
                projected_image(&format!("b{i}.pgm"), 1.0, 10, 553350.0 + 500.0 * i as f64, 4182450.0)
            })
            .collect();
        let ma = write_manifest(d.path(), "a.json", "CD-A", 1, "projected", a_images, None);
        let mb = write_manifest(d.path(), "b.json", "CD-B", 1, "projected", b_images, None);
        let manifests = [ma.as_path(), mb.as_path()];

        let golden_dir = d.path().join("golden");
        let golden = {
            let store = quick_store(&golden_dir);
            pipeline(&store, &manifests, &JobsConfig::default(), &mut vec![]).unwrap();
            visible_blobs(&store, ThemeId(1))
        };
        let frames = integrity_scan(&golden_dir).unwrap().frames;
        let (mut in_cutter, mut in_scaler) = (vec![], vec![]);
        let mut draws = 0;
        while in_cutter.len() < 5 || in_scaler.len() < 5 {
            draws += 1;
            assert!(draws < 500, "could not place kill points");
            let kill = rng.random_range(1..=frames);
            let torn = rng.random_bool(0.5);
            let dir = d.path().join(format!("k{draws}"));
            let step = {
                let store = faulty_store(&dir, kill, torn);
                match pipeline(&store, &manifests, &JobsConfig::default(), &mut vec![]) {
                    Ok(()) => continue,
                    Err(step) => step,
                }
            };
            let phase = if step % 2 == 0 { &mut in_cutter } else { &mut in_scaler };
            if phase.len() >= 5 {
                continue;
            }
            phase.push(kill);
            let store = quick_store(&dir);
            let done_before: BTreeSet<String> =
                store.load_jobs().iter().flat_map(|j| j.files_done.iter().cloned()).collect();
            let mut read = vec![];
            pipeline(&store, &manifests, &eager_jobs(), &mut read).unwrap_or_else(|s| panic!("kill {kill}: resume failed at step {s}"));
            for f in &read {
                assert!(!done_before.contains(f), "kill {kill}: {f} processed twice");
            }
            assert!(visible_blobs(&store, ThemeId(1)) == golden, "kill {kill}: visible state differs");
            let scan = integrity_scan(&dir).unwrap();
            assert!(scan.is_consistent(), "kill {kill}: {:?}", scan.problems);
        }
        format!("cutter kills {in_cutter:?}, scaler kills {in_scaler:?}")
    });
}

#[test]
fn reader_safety_under_load() {
    criterion("reader safety under load", Some(Duration::from_secs(300)), || {
        const DIRECT_READS: u64 = 10_000;
        const HTTP_READS: u64 = 2_000;
        let d = tempfile::tempdir().unwrap();
        let store = Arc::new(quick_store(&d.path().join("store")));
        let image = |round: i64| {
            let img = gray_image(600, 600, |x, y| {
                let v = ground(x as i64 + round, y as i64);
                if round > 0 && v % 11 == 0 { 255 } else { v }
            });
            let f = format!("l{round}.pgm");
            write_pgm(d.path(), &f, &img);
            let shift = (round % 3) as f64 * 100.0;
            let entry = projected_image(&f, 1.0, 10, 553200.0 + shift, 4182600.0 - shift);
            write_manifest(d.path(), &format!("l{round}.json"), &format!("LOAD-{round}"), 1, "projected", vec![entry], None)
        };
        cut(&store, &image(0));
        let addrs: Vec<TileAddress> = (0..3).flat_map(|i| (0..3).map(move |j| doq(10, 2766 + i, 20913 - j))).collect();

        let rt = tokio::runtime::Runtime::new().unwrap();
        let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).unwrap();
        let port = listener.local_addr().unwrap().port();
        let app = server::router(AppState::new(store.clone(), Arc::new(Gazetteer::new())));
        rt.spawn(async move { axum::serve(listener, app).await.unwrap() });

        let loading = Arc::new(AtomicBool::new(false));
        let readers_left = Arc::new(AtomicU64::new(2));
        let direct = {
            let (store, addrs, loading, left) = (store.clone(), addrs.clone(), loading.clone(), readers_left.clone());
            std::thread::spawn(move || {
                while !loading.load(Ordering::SeqCst) {
                    std::hint::spin_loop();
                }
                let (mut n, mut bad) = (0u64, 0u64);
                while n < DIRECT_READS {
                    let a = addrs[(n % addrs.len() as u64) as usize];
                    match store.get_visible_tile(&a) {
                        Ok(Some(blob)) => match raster::decode_tile(&blob) {
                            Ok(r) if r.width() == TILE_PIXELS && r.height() == TILE_PIXELS => {}
                            _ => bad += 1,
                        },
                        _ => bad += 1,
                    }
                    n += 1;
                }
                left.fetch_sub(1, Ordering::SeqCst);
                (n, bad)
            })
        };
        let http = {
            let (addrs, loading, left) = (addrs.clone(), loading.clone(), readers_left.clone());
            std::thread::spawn(move || {
                while !loading.load(Ordering::SeqCst) {
                    std::hint::spin_loop();
                }
                let agent = ureq::Agent::config_builder().http_status_as_error(false).build().new_agent();
                let (mut n, mut bad, mut errors_5xx) = (0u64, 0u64, 0u64);
                while n < HTTP_READS {
                    let a = addrs[(n % addrs.len() as u64) as usize];
                    let url = format!("http://127.0.0.1:{port}/tile?{}", a.query_string());
                    match agent.get(&url).call() {
                        Ok(mut resp) => {
                            let status = resp.status().as_u16();
                            if status >= 500 {
                                errors_5xx += 1;
                            } else if status != 200 {
                                bad += 1;
                            } else {
                                let body = resp.body_mut().read_to_vec().unwrap_or_default();
                                if raster::decode_tile(&body).map(|r| r.width() != TILE_PIXELS).unwrap_or(true) {
                                    bad += 1;
                                }
                            }
                        }
                        Err(_) => bad += 1,
                    }
                    n += 1;
                }
                left.fetch_sub(1, Ordering::SeqCst);
                (n, bad, errors_5xx)
            })
        };
        // Keep loading until both readers are done, so every read overlaps a load.
        loading.store(true, Ordering::SeqCst);
        let mut rounds = 0;
        while readers_left.load(Ordering::SeqCst) > 0 {
            rounds += 1;
            assert!(rounds < 10_000);
            cut(&store, &image(rounds));
        }
        let (dn, dbad) = direct.join().unwrap();
        let (hn, hbad, h5xx) = http.join().unwrap();
        assert_eq!((dbad, hbad, h5xx), (0, 0, 0), "bad direct reads, bad http reads, 5xx");
        assert!(dn + hn >= 10_000);
        format!("{dn} direct + {hn} http reads over {rounds} loads, 0 bad, 0 5xx")
    });
}

#[test]
fn utm_projection() {
    criterion("utm projection", None, || {
        let mut rng = StdRng::seed_from_u64(0x5eed_0005);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let zone = rng.random_range(1..=60u8);
            let central = -183.0 + 6.0 * zone as f64;
            let lat = rng.random_range(0.0..84.0);
            let lon = central + rng.random_range(-3.0..3.0);
            let geo = GeoCoord::new(lat, lon).unwrap();
            let u1 = grid::latlon_to_utm_in_zone(geo, zone).unwrap();
            let g2 = grid::utm_to_latlon(u1).unwrap();
            let u2 = grid::latlon_to_utm_in_zone(g2, zone).unwrap();
            let err = (u1.easting - u2.easting).hypot(u1.northing - u2.northing);
            let m_per_deg = 111_320.0;
            let geo_err = ((g2.lat - lat) * m_per_deg).hypot((g2.lon - lon) * m_per_deg * lat.to_radians().cos());
            worst = worst.max(err).max(geo_err);
        }
        assert!(worst < 0.01, "worst round-trip error {worst} m");
        // CN Tower, Toronto: 43°38'33.24"N 79°23'13.7"W is 17T 630084 E 4833438 N.
        let lat = 43.0 + 38.0 / 60.0 + 33.24 / 3600.0;
        let lon = -(79.0 + 23.0 / 60.0 + 13.7 / 3600.0);
        let u = grid::latlon_to_utm(GeoCoord::new(lat, lon).unwrap()).unwrap();
        assert_eq!(u.zone, 17);
        let off = (u.easting - 630084.0).hypot(u.northing - 4833438.0);
        assert!(off < 1.0, "published vector off by {off} m");
        format!("worst round trip {worst:.2e} m, vector off {off:.2} m")
    });
}

const OCTANT_WINDS: [&str; 16] =
    ["N", "NNE", "NE", "ENE", "E", "ESE", "SE", "SSE", "S", "SSW", "SW", "WSW", "W", "WNW", "NW", "NNW"];

fn oracle_haversine(a: GeoCoord, b: GeoCoord) -> f64 {
    let (p1, p2) = (a.lat.to_radians(), b.lat.to_radians());
    let dp = p2 - p1;
    let dl = (b.lon - a.lon).to_radians();
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * 6371.0 * h.sqrt().asin()
}

fn oracle_wind(from: GeoCoord, to: GeoCoord) -> &'static str {
    let (p1, p2) = (from.lat.to_radians(), to.lat.to_radians());
    let dl = (to.lon - from.lon).to_radians();
    let y = dl.sin() * p2.cos();
    let x = p1.cos() * p2.sin() - p1.sin() * p2.cos() * dl.cos();
    let bearing = y.atan2(x).to_degrees().rem_euclid(360.0);
    OCTANT_WINDS[((bearing + 11.25) / 22.5).floor() as usize % 16]
}

struct CorpusPlace {
    name: String,
    state: String,
    country: String,
    alts: Vec<String>,
    at: GeoCoord,
}

#[test]
fn gazetteer() {
    criterion("gazetteer", None, || {
        let mut rng = StdRng::seed_from_u64(0x5eed_0006);
        let syllables = ["ca", "ry", "dur", "ham", "ra", "lei", "gh", "mor", "ris", "ville", "ton", "ash", "bo", "ro", "win", "ston"];
        let word = |rng: &mut StdRng, n: usize| -> String {
            let mut w: String = (0..n).map(|_| syllables[rng.random_range(0..syllables.len())]).collect();
            w[..1].make_ascii_uppercase();
            w
        };
        let countries = ["Atlantis", "Borealia", "Caledon"];
        let mut states: Vec<(String, String)> = vec![];
        for c in countries {
            for _ in 0..8 {
                states.push((c.to_string(), word(&mut rng, 2)));
            }
        }
        states.sort();
        states.dedup();
        let mut seen = BTreeSet::new();
        let mut corpus: Vec<CorpusPlace> = vec![];
        let mut alt_count = 0;
        while corpus.len() < 10_000 {
            let (country, state) = states[rng.random_range(0..states.len())].clone();
            let stateless = rng.random_bool(0.05);
            let state = if stateless { String::new() } else { state };
            let len = rng.random_range(1..=3);
            let name = word(&mut rng, len);
            if !seen.insert((country.clone(), state.clone(), name.clone())) {
                continue;
            }
            let alts = if !stateless && rng.random_bool(0.05) { vec![format!("Old {}", word(&mut rng, 2))] } else { vec![] };
            alt_count += alts.len();
            let at = GeoCoord::new(rng.random_range(25.0..49.0), rng.random_range(-125.0..-67.0)).unwrap();
            corpus.push(CorpusPlace { name, state, country, alts, at });
        }
        let mut tsv = String::new();
        for c in countries {
            tsv += &format!("{c}\tcountry\t\t\t\n");
        }
        for (c, st) in &states {
            tsv += &format!("{st}\tstate\t{c}\t\t\n");
        }
        for p in &corpus {
            let parent = if p.state.is_empty() { p.country.clone() } else { format!("{}/{}", p.country, p.state) };
            tsv += &format!("{}\tplace\t{parent}\t{}\t{}\n", p.name, p.at.lat, p.at.lon);
            for a in &p.alts {
                tsv += &format!("{a}\talt_place\t{parent}/{}\t\t\n", p.name);
            }
        }
        let mut g = Gazetteer::new();
        let rep = g.import_tsv(&tsv);
        assert!(rep.rejected.is_empty(), "{:?}", &rep.rejected[..rep.rejected.len().min(3)]);
        assert_eq!(g.place_count(), 10_000);

        // The oracle identifies places by their full path.
        let ids: BTreeMap<(String, String, String), u32> = g
            .places()
            .iter()
            .map(|p| {
                let st = p.state_id.and_then(|s| g.state_name(s)).unwrap_or("").to_string();
                ((g.country_name(p.country_id).unwrap().to_string(), st, p.formal_name.clone()), p.place_id)
            })
            .collect();
        let id_of = |p: &CorpusPlace| ids[&(p.country.clone(), p.state.clone(), p.name.clone())];

        for q in 0..200 {
            let p = &corpus[rng.random_range(0..corpus.len())];
            let source = if !p.alts.is_empty() && rng.random_bool(0.5) { &p.alts[0] } else { &p.name };
            let mut query: String = source.chars().take(rng.random_range(1..=source.len())).collect();
            if rng.random_bool(0.3) {
                query = query.to_uppercase();
            }
            if q % 20 == 0 {
                query.push('q');
            }
            let state = (rng.random_bool(0.2) && !p.state.is_empty()).then(|| p.state.clone());
            let country = rng.random_bool(0.2).then(|| countries[rng.random_range(0..3)].to_string());
            let needle = query.to_ascii_lowercase();
            let mut want: Vec<(MatchRank, String, u32)> = corpus
                .iter()
                .filter(|c| state.as_ref().is_none_or(|s| c.state.eq_ignore_ascii_case(s)))
                .filter(|c| country.as_ref().is_none_or(|k| c.country.eq_ignore_ascii_case(k)))
                .filter_map(|c| {
                    let names = std::iter::once(&c.name).chain(&c.alts).map(|n| n.to_ascii_lowercase());
                    let rank = names
                        .filter_map(|n| {
                            if n == needle {
                                Some(MatchRank::Exact)
                            } else if n.starts_with(&needle) {
                                Some(MatchRank::Prefix)
                            } else {
                                None
                            }
                        })
                        .min()?;
                    Some((rank, c.name.clone(), id_of(c)))
                })
                .collect();
            want.sort();
            let got: Vec<(MatchRank, String, u32)> = g
                .search_by_name(&query, state.as_deref(), country.as_deref())
                .into_iter()
                .map(|h| (h.rank, h.place.formal_name, h.place.place_id))
                .collect();
            assert_eq!(got, want, "query {query:?} state {state:?} country {country:?}");
        }

        let caption_shape = |c: &str| {
            let mut parts = c.splitn(4, ' ');
            let d = parts.next().unwrap_or("");
            !d.is_empty()
                && d.bytes().all(|b| b.is_ascii_digit())
                && parts.next() == Some("Km")
                && parts.next().is_some_and(|w| OCTANT_WINDS.contains(&w))
                && parts.next().is_some_and(|rest| rest.starts_with("of ") && rest.len() > 3)
        };
        for _ in 0..100 {
            let at = GeoCoord::new(rng.random_range(24.0..50.0), rng.random_range(-126.0..-66.0)).unwrap();
            let (best, dist) = corpus
                .iter()
                .map(|c| (c, oracle_haversine(at, c.at)))
                .min_by(|a, b| a.1.total_cmp(&b.1).then(id_of(a.0).cmp(&id_of(b.0))))
                .unwrap();
            let n = g.nearest_place(at).unwrap();
            assert_eq!(n.place.place_id, id_of(best), "nearest to {at:?}");
            assert!((n.distance_km - dist).abs() < 1e-6);
            assert_eq!(n.wind, oracle_wind(best.at, at));
            let mut full = best.name.clone();
            if !best.state.is_empty() {
                full += &format!(", {}", best.state);
            }
            full += &format!(", {}", best.country);
            assert_eq!(n.caption, format!("{} Km {} of {full}", dist.round() as i64, oracle_wind(best.at, at)));
            assert!(caption_shape(&n.caption), "{}", n.caption);
        }
        format!("10000 places, {alt_count} alternate names, 200 queries, 100 points")
    });
}

/// Lat/lon bounds of an image's footprint, sampled densely along its edges.
fn dense_bbox(zone: i32, left: f64, top: f64, w: f64, h: f64) -> GeoBox {
    let mut b = GeoBox { min_lat: 90.0, min_lon: 180.0, max_lat: -90.0, max_lon: -180.0 };
    let steps = 2000;
    for k in 0..=steps {
        let t = k as f64 / steps as f64;
        for (e, n) in [(left + t * w, top), (left + t * w, top - h), (left, top - t * h), (left + w, top - t * h)] {
            let g = grid::utm_to_latlon(UtmCoord::new(zone, e, n).unwrap()).unwrap();
            b.min_lat = b.min_lat.min(g.lat);
            b.max_lat = b.max_lat.max(g.lat);
            b.min_lon = b.min_lon.min(g.lon);
            b.max_lon = b.max_lon.max(g.lon);
        }
    }
    b
}

#[test]
fn coverage_maps() {
    criterion("coverage maps", None, || {
        let d = tempfile::tempdir().unwrap();
        let store = quick_store(&d.path().join("store"));
        let (left, top, w, h) = (553213.0, 4182587.0, 3000u32, 2600u32);
        let img = gray_image(w, h, |x, y| ground(x as i64, y as i64));
        write_pgm(d.path(), "scene.pgm", &img);
        let m = write_manifest(d.path(), "m.json", "COVER", 1, "projected", vec![projected_image("scene.pgm", 1.0, 10, left, top)], None);
        cut(&store, &m);
        let b = dense_bbox(10, left, top, w as f64, h as f64);
        let mut counts = vec![];
        for ppd in [1u32, 8, 48] {
            let p = ppd as f64;
            let mut want = BTreeSet::new();
            let rows = ((90.0 - b.max_lat - 2.0) * p).floor() as u32..((90.0 - b.min_lat + 2.0) * p).ceil() as u32;
            let cols = ((b.min_lon + 180.0 - 2.0) * p).floor() as u32..((b.max_lon + 180.0 + 2.0) * p).ceil() as u32;
            for r in rows {
                let (lat_hi, lat_lo) = (90.0 - r as f64 / p, 90.0 - (r + 1) as f64 / p);
                for c in cols.clone() {
                    let (lon_lo, lon_hi) = (-180.0 + c as f64 / p, -180.0 + (c + 1) as f64 / p);
                    if lat_lo < b.max_lat && lat_hi > b.min_lat && lon_lo < b.max_lon && lon_hi > b.min_lon {
                        want.insert((r, c));
                    }
                }
            }
            for theme in [Some(ThemeId(1)), None] {
                let got = store.coverage_snapshot(theme, ppd);
                assert_eq!(got.cells, want, "{ppd} px/degree");
            }
            counts.push(format!("{}@{ppd}", want.len()));
        }
        assert!(store.coverage_snapshot(Some(ThemeId(2)), 8).cells.is_empty());
        format!("cells {}", counts.join(" "))
    });
}
