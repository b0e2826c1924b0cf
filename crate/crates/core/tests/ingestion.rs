use edgeprompt::data::{
    ingest_manifest, ingest_volume, phantom_volume, read_manifest, scan_dataset, write_manifest, write_volume_pngs,
    PhantomConfig,
};
use edgeprompt::raster::Modality;
use edgeprompt::volume::{dice3d, read_nifti, stack, write_nifti};

fn phantom(id: &str, modality: Modality) -> edgeprompt::data::VolumeRecord {
    let cfg = PhantomConfig { slices_per_volume: 3, ..PhantomConfig::default() };
    phantom_volume(id, modality, &cfg, 31).unwrap()
}

#[test]
fn png_volumes_round_trip_through_ingestion() {
    let dir = tempfile::tempdir().unwrap();
    for modality in [Modality::Ct, Modality::MrT1Oop] {
        let vol = phantom("p", modality);
        let path = dir.path().join(modality.as_str());
        write_volume_pngs(&vol, &path).unwrap();
        let back = ingest_volume(&path, modality, "p").unwrap();
        assert_eq!(back.masks, vol.masks, "{modality}");
        assert_eq!(back.len(), vol.len());
        for (a, b) in back.slices.iter().zip(&vol.slices) {
            let worst = a.pixels().data().iter().zip(b.pixels().data()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
            assert!(worst < 1e-3, "{modality}: pixel error {worst}");
        }

        // Ingesting what was ingested is a fixed point.
        let again_dir = dir.path().join(format!("{}_again", modality.as_str()));
        write_volume_pngs(&back, &again_dir).unwrap();
        let again = ingest_volume(&again_dir, modality, "p").unwrap();
        assert_eq!(again.masks, back.masks);
        assert_eq!(again.slices, back.slices);
    }
}

#[test]
fn scanned_manifest_reloads_the_same_volumes() {
    let root = tempfile::tempdir().unwrap();
    write_volume_pngs(&phantom("ct_a", Modality::Ct), &root.path().join("ct_a")).unwrap();
    write_volume_pngs(&phantom("mr_b", Modality::MrT1Oop), &root.path().join("mr_b")).unwrap();
    let entries = scan_dataset(root.path(), &[Modality::MrT1Oop]).unwrap();
    assert_eq!(entries.len(), 2);
    assert_eq!(entries[0].modality, Modality::Ct);
    assert_eq!(entries[1].modality, Modality::MrT1Oop);
    assert!(entries.iter().all(|e| e.n_slices == 3));

    let manifest = root.path().join("manifest.csv");
    write_manifest(&entries, &manifest).unwrap();
    assert_eq!(read_manifest(&manifest).unwrap(), entries);
    let volumes = ingest_manifest(&entries).unwrap();
    assert_eq!(volumes.iter().map(|v| v.volume_id.as_str()).collect::<Vec<_>>(), ["ct_a", "mr_b"]);
}

#[test]
fn missing_image_directory_is_an_ingestion_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = ingest_volume(dir.path(), Modality::Ct, "x").unwrap_err();
    assert!(matches!(err, edgeprompt::Error::Ingestion { .. }), "{err}");
}

#[test]
fn nifti_round_trip_keeps_voxels_and_geometry() {
    let vol = phantom("n", Modality::Ct);
    let s = stack("n", &vol.masks, [1.25, 1.5, 4.0], [-10.0, 20.0, 5.0]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("n.nii.gz");
    write_nifti(&s, &path).unwrap();
    let back = read_nifti(&path, "n").unwrap();
    assert_eq!(back.voxels(), s.voxels());
    assert_eq!(back.shape(), s.shape());
    for (a, b) in back.affine().matrix().iter().flatten().zip(s.affine().matrix().iter().flatten()) {
        assert!((a - b).abs() < 1e-5);
    }
    assert_eq!(dice3d(&back, &s).unwrap(), 1.0);
}
