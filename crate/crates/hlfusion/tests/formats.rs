use std::fs;
use std::path::Path;

use hlfusion::checkpoint;
use hlfusion::cube_file::{convert_bands, convert_labels, load_cube, read_raster, save_cube, write_raster, Raster};
use hlfusion::Error;
use hlfusion_core::data::{extract_patches, normalize, synth_scene, LabelMap, SceneCube, Split, SynthConfig};
use hlfusion_core::model::{FusionModel, ModelConfig};
use hlfusion_core::train::{evaluate_split, train, TrainConfig};
use hlfusion_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn scene() -> SceneCube {
    let cfg = SynthConfig {
        height: 16,
        width: 12,
        block_size: 4,
        hsi_channels: 5,
        lidar_channels: 2,
        ..SynthConfig::default()
    };
    synth_scene(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap().cube
}

fn paths(dir: &Path) -> [std::path::PathBuf; 3] {
    ["hsi.cube", "lidar.cube", "labels.cube"].map(|n| dir.join(n))
}

#[test]
fn cube_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let [h, l, y] = paths(dir.path());
    let cube = scene();
    save_cube(&cube, &h, &l, &y).unwrap();
    let back = load_cube(&h, &l, &y).unwrap();
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(back.hsi()), bits(cube.hsi()));
    assert_eq!(bits(back.lidar()), bits(cube.lidar()));
    assert_eq!(back.labels(), cube.labels());
    let again = dir.path().join("again.cube");
    write_raster(&again, &read_raster(&h).unwrap()).unwrap();
    assert_eq!(fs::read(&again).unwrap(), fs::read(&h).unwrap());
}

#[test]
fn misregistered_files_are_rejected_with_all_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let [h, l, y] = paths(dir.path());
    let cube = scene();
    save_cube(&cube, &h, &l, &y).unwrap();
    write_raster(&l, &Raster::Float(Tensor::zeros(&[15, 12, 2]).unwrap())).unwrap();
    let msg = load_cube(&h, &l, &y).unwrap_err().to_string();
    for part in ["[16, 12, 5]", "[15, 12, 2]", "[16, 12, 1]", "hsi.cube", "lidar.cube", "labels.cube"] {
        assert!(msg.contains(part), "{msg} lacks {part}");
    }
}

#[test]
fn bad_magic_and_float_labels_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let [h, l, y] = paths(dir.path());
    save_cube(&scene(), &h, &l, &y).unwrap();
    let mut bytes = fs::read(&h).unwrap();
    bytes[0] = b'X';
    fs::write(&h, &bytes).unwrap();
    assert!(matches!(load_cube(&h, &l, &y), Err(Error::Format { .. })));
    save_cube(&scene(), &h, &l, &y).unwrap();
    write_raster(&y, &Raster::Float(Tensor::zeros(&[16, 12, 1]).unwrap())).unwrap();
    assert!(load_cube(&h, &l, &y).is_err());
}

#[test]
fn houston_sized_cube_loads_with_its_shapes() {
    let (rows, cols, bands) = (349, 1905, 144);
    let dir = tempfile::tempdir().unwrap();
    let [h, l, y] = paths(dir.path());
    let mut labels = vec![0u32; rows * cols];
    labels[7] = 1;
    labels[rows * cols - 1] = 15;
    save_cube(
        &SceneCube::new(
            Tensor::zeros(&[rows, cols, bands]).unwrap(),
            Tensor::zeros(&[rows, cols, 1]).unwrap(),
            LabelMap::new(rows, cols, labels).unwrap(),
        )
        .unwrap(),
        &h,
        &l,
        &y,
    )
    .unwrap();
    let cube = load_cube(&h, &l, &y).unwrap();
    assert_eq!(cube.hsi().shape(), [349, 1905, 144]);
    assert_eq!(cube.lidar().shape(), [349, 1905, 1]);
    assert_eq!(cube.n_classes(), 15);
}

#[test]
fn text_matrices_convert_band_interleaved() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, y) = (dir.path().join("a.txt"), dir.path().join("b.txt"), dir.path().join("y.txt"));
    fs::write(&a, "1 2 3\n4 5 6\n").unwrap();
    fs::write(&b, "10 20 30\n\n40 50 60\n").unwrap();
    fs::write(&y, "0 1 2\n2 1 0\n").unwrap();
    let Raster::Float(t) = convert_bands(&[&a, &b]).unwrap() else {
        panic!("expected float raster");
    };
    assert_eq!(t.shape(), [2, 3, 2]);
    assert_eq!(&t.data()[..4], &[1.0, 10.0, 2.0, 20.0]);
    match convert_labels(&y).unwrap() {
        Raster::Int { data, channels, .. } => assert_eq!((channels, data), (1, vec![0, 1, 2, 2, 1, 0])),
        other => panic!("unexpected {other:?}"),
    }
    fs::write(&b, "1 2\n3 4\n").unwrap();
    assert!(convert_bands(&[&a, &b]).is_err());
    fs::write(&y, "0 1.5\n").unwrap();
    assert!(convert_labels(&y).is_err());
}

#[test]
fn checkpoint_round_trip_reproduces_evaluation() {
    let cube = normalize(&scene());
    let data = extract_patches(&cube, 3)
        .unwrap()
        .split_per_class(3, &mut ChaCha8Rng::seed_from_u64(1))
        .unwrap();
    let mut model = FusionModel::new(ModelConfig {
        n_stacks: 2,
        embed_dim: 3,
        patch_size: 3,
        hsi_channels: 5,
        lidar_channels: 2,
        n_classes: data.n_classes(),
        seed: 4,
        ..ModelConfig::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        learning_rate: 1e-2,
        epochs: 3,
        batch_size: 4,
        eval_every: 0,
        ..TrainConfig::default()
    };
    train(&mut model, &data, &cfg, &mut ()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&model, &path).unwrap();
    let back = checkpoint::load(&path).unwrap();
    assert_eq!(back, model);
    let (a, b) = (
        evaluate_split(&model, &data, Split::Test).unwrap(),
        evaluate_split(&back, &data, Split::Test).unwrap(),
    );
    assert_eq!(a, b);
    assert_eq!(a.overall_accuracy.to_bits(), b.overall_accuracy.to_bits());
}
