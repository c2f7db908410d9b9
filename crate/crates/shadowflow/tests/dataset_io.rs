use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use shadowflow::dataset::{read_dataset, read_manifest, write_dataset};
use shadowflow::imageio;
use shadowflow_core::synthdata::{random_scene, render_video, Preset};
use shadowflow_core::training::Video;

fn videos(n: usize) -> Vec<(Video, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    (0..n)
        .map(|i| {
            let spec = random_scene(Preset::Default, 24, 3, &mut rng).unwrap();
            let areas = spec.primitives.iter().map(|p| p.area()).collect();
            (render_video(&spec).unwrap().into_video(format!("v{i}")), areas)
        })
        .collect()
}

#[test]
fn written_dataset_reads_back_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    let vids = videos(2);
    let manifest = write_dataset(&root, &vids).unwrap();
    assert!(manifest.is_file());
    let ds = read_dataset(&root).unwrap();
    let m = read_manifest(&root).unwrap().unwrap();
    for ((orig, areas), (back, entry)) in vids.iter().zip(ds.videos.iter().zip(&m.videos)) {
        assert_eq!(entry.frames, orig.frames.len());
        assert_eq!(&entry.areas, areas);
        assert_eq!(std::fs::read_dir(root.join(&entry.name).join("frames")).unwrap().count(), entry.frames);
        assert_eq!(back.masks, orig.masks);
        assert_eq!(back.flows, orig.flows);
        for (a, b) in back.frames.iter().zip(&orig.frames) {
            // exact up to 8-bit quantisation
            let q = b.map(|v| imageio::to_byte(v) as f64 / 255.0);
            assert_eq!(a, &q);
        }
    }
    // a second write of the read-back data reproduces every byte
    let root2 = dir.path().join("data2");
    let back: Vec<_> = ds.videos.into_iter().zip(m.videos).map(|(v, e)| (v, e.areas)).collect();
    write_dataset(&root2, &back).unwrap();
    for v in ["v0", "v1"] {
        for sub in ["frames", "masks", "flow"] {
            for e in std::fs::read_dir(root.join(v).join(sub)).unwrap() {
                let name = e.unwrap().file_name();
                let a = std::fs::read(root.join(v).join(sub).join(&name)).unwrap();
                let b = std::fs::read(root2.join(v).join(sub).join(&name)).unwrap();
                assert_eq!(a, b, "{v}/{sub}/{name:?}");
            }
        }
    }
}

#[test]
fn manifest_free_layout_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    let mut vids = videos(1);
    vids[0].0.flows = None;
    write_dataset(&root, &vids).unwrap();
    std::fs::remove_file(root.join("manifest.txt")).unwrap();
    let ds = read_dataset(&root).unwrap();
    assert_eq!(ds.videos.len(), 1);
    assert_eq!(ds.videos[0].name, "v0");
    assert!(ds.videos[0].flows.is_none());
}

#[test]
fn mismatched_directory_contents_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    write_dataset(&root, &videos(1)).unwrap();
    std::fs::remove_file(root.join("v0/masks/0002.png")).unwrap();
    assert!(read_dataset(&root).is_err());
    assert!(read_dataset(&dir.path().join("nowhere")).is_err());
}
