mod common;

use regionlearner::datagen::Split;
use regionlearner::harness::visualize::read_pnm;
use regionlearner::harness::{video_maps, visualize, Config, Trainer};

use common::{rendered, small_config};

#[test]
fn writes_expected_files_with_normalised_masks() {
    let cfg = Config { regions: 4, ..small_config() };
    let t = Trainer::new(&cfg).unwrap();
    let sample = &rendered(Split::Val, 2)[1];
    let dir = tempfile::tempdir().unwrap();
    let files = visualize(&t.model, &sample.pair, dir.path()).unwrap();
    assert_eq!(files.len(), cfg.frames * (4 + 1 + 1));

    let p = cfg.patch as f64;
    for frame in 0..cfg.frames {
        let (ch, w, h, maxval, px) = read_pnm(&dir.path().join(format!("frame{frame}_image.ppm"))).unwrap();
        assert_eq!((ch, w, h, maxval, px.len()), (3, 32, 32, 255, 32 * 32 * 3));
        let (ch, _, _, maxval, idx) = read_pnm(&dir.path().join(format!("frame{frame}_assign.pgm"))).unwrap();
        assert_eq!((ch, maxval), (1, 15));
        assert!(idx.iter().all(|&i| i <= 15));
        let mut total = 0.0;
        for k in 0..4 {
            let (ch, _, _, maxval, px) = read_pnm(&dir.path().join(format!("frame{frame}_mask{k}.ppm"))).unwrap();
            assert_eq!((ch, maxval), (3, 65535));
            let sum: f64 = px.iter().step_by(3).map(|&v| f64::from(v)).sum();
            // each mask sums to one over the grid, each cell covers P² pixels
            assert!((sum - 65535.0 * p * p).abs() <= 16.0 * p * p, "mask sum {sum}");
            total += sum;
        }
        assert!(total > 0.0);
    }
}

#[test]
fn disabled_stages_skip_their_images() {
    let cfg = Config { disable_quantization: true, disable_aggregation: true, ..small_config() };
    let t = Trainer::new(&cfg).unwrap();
    let sample = &rendered(Split::Val, 1)[0];
    let dir = tempfile::tempdir().unwrap();
    let files = visualize(&t.model, &sample.pair, dir.path()).unwrap();
    assert_eq!(files.len(), cfg.frames);
    let maps = video_maps(&t.model, &sample.pair).unwrap();
    assert!(maps.center_of_mass(0, 0).is_none());
}

#[test]
fn centre_of_mass_of_uniform_mask_is_frame_centre() {
    let mut cfg = small_config();
    cfg.regions = 2;
    let mut t = Trainer::new(&cfg).unwrap();
    // zero conv weights and bias give uniform masks
    for id in [t.model.regions.weight, t.model.regions.bias] {
        t.model.store.get_mut(id).values_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let sample = &rendered(Split::Val, 1)[0];
    let maps = video_maps(&t.model, &sample.pair).unwrap();
    let (x, y) = maps.center_of_mass(0, 1).unwrap();
    assert!((x - 16.0).abs() < 1e-9 && (y - 16.0).abs() < 1e-9);
}

#[test]
fn unwritable_path_is_an_error() {
    let t = Trainer::new(&small_config()).unwrap();
    let sample = &rendered(Split::Val, 1)[0];
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("occupied");
    std::fs::write(&file, b"x").unwrap();
    assert!(visualize(&t.model, &sample.pair, &file.join("sub")).is_err());
}
