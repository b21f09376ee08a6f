use chromaset_core::encoder::EncoderConfig;
use chromaset_core::imaging::{tile, Image};
use chromaset_core::pipeline::{Pipeline, Style};
use chromaset_core::synth::desk_dataset;
use chromaset_core::trainer::{train_from, train_until, Checkpoint, Model, TrainConfig};
use proptest::prelude::*;

fn small_model(seed: u64) -> Model {
    let mut m = Model::init(&EncoderConfig { k: 4, thumbnail_size: 16, widths: vec![4, 8], seed }).unwrap();
    for t in m.encoder.tensors_mut() {
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v += 0.03 * (((i as u64 + seed) % 7) as f32 - 3.0);
        }
    }
    m
}

fn image_strategy(max_side: usize) -> impl Strategy<Value = Image> {
    (1..=max_side, 1..=max_side).prop_flat_map(|(h, w)| {
        prop::collection::vec(0f32..=1.0, h * w * 3).prop_map(move |d| Image::new(h, w, d).unwrap())
    })
}

fn small_train_config(steps: u64) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 2,
        image_size: 16,
        encoder: EncoderConfig { k: 4, thumbnail_size: 16, widths: vec![4, 8], seed: 3 },
        ..TrainConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn transfer_keeps_shape_and_range(content in image_strategy(40), style in image_strategy(24), seed in 0u64..4) {
        let out = Pipeline::new(small_model(seed)).transfer(&content, &style).unwrap();
        prop_assert_eq!((out.height(), out.width()), (content.height(), content.width()));
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn patch_size_does_not_change_transfer(content in image_strategy(40), style in image_strategy(16), patch in 1usize..48) {
        let model = small_model(1);
        let whole = Pipeline::new(model.clone()).with_patch_size(4096).transfer(&content, &style).unwrap();
        let tiled = Pipeline::new(model).with_patch_size(patch).transfer(&content, &style).unwrap();
        prop_assert_eq!(whole, tiled);
    }

    #[test]
    fn preset_path_matches_transfer(content in image_strategy(32), style in image_strategy(32)) {
        let p = Pipeline::new(small_model(2));
        let preset = p.extract_preset(&style, "s").unwrap();
        let (z, _, _) = p.normalize(&content).unwrap();
        prop_assert_eq!(p.stylize(&z, Style::Preset(&preset)).unwrap(), p.transfer(&content, &style).unwrap());
    }

    #[test]
    fn tiles_cover_each_pixel_once(h in 1usize..300, w in 1usize..300, patch in 1usize..128) {
        let img = Image::filled(h, w, [0.0; 3]).unwrap();
        let grid = tile(&img, patch).unwrap();
        let mut hits = vec![0u8; h * w];
        for t in grid.tiles() {
            prop_assert!(t.height <= patch && t.width <= patch);
            for r in t.row..t.row + t.height {
                for c in t.col..t.col + t.width {
                    hits[r * w + c] += 1;
                }
            }
        }
        prop_assert!(hits.iter().all(|&n| n == 1));
    }

    #[test]
    fn checkpoint_bytes_roundtrip(seed in 0u64..1000) {
        let ckpt = Checkpoint::new(small_model(seed));
        let bytes = ckpt.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        prop_assert_eq!(back.encode(), bytes);
        prop_assert_eq!(back.fingerprint(), ckpt.fingerprint());
    }
}

#[test]
fn training_is_reproducible_and_resumable() {
    let images = desk_dataset(4, 16, 9);
    let cfg = small_train_config(4);
    let start = || Checkpoint::new(Model::init(&cfg.encoder).unwrap());
    let a = train_from(&cfg, &images, start()).unwrap();
    let b = train_from(&cfg, &images, start()).unwrap();
    assert_eq!(a.checkpoint.encode(), b.checkpoint.encode());
    assert_eq!(a.log, b.log);

    let half = train_until(&cfg, &images, start(), 2).unwrap();
    let resumed = train_from(&cfg, &images, half.checkpoint).unwrap();
    assert_eq!(resumed.checkpoint.encode(), a.checkpoint.encode());
    assert_eq!(resumed.log, a.log[2..]);
}
