mod common;

use common::{subjects, toy};
use uvatar::dataset::{load_subjects, SubjectDataset};
use uvatar::io::quantize_like_png;
use uvatar::Error;

#[test]
fn subjects_round_trip_through_directories() {
    let (_, assets) = toy();
    let data = subjects(&assets, 2, 1);
    let root = tempfile::tempdir().unwrap();
    for d in &data {
        d.save(&root.path().join(&d.id)).unwrap();
    }
    let back = load_subjects(root.path()).unwrap();
    assert_eq!(back.len(), 2);
    for (a, b) in back.iter().zip(&data) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.len(), b.len());
        for (x, y) in a.observations.iter().zip(&b.observations) {
            assert_eq!(x.camera, y.camera);
            assert_eq!(x.params, y.params);
            assert_eq!(x.image, quantize_like_png(&y.image));
        }
    }
}

#[test]
fn per_view_parameters_survive_saving() {
    let (_, assets) = toy();
    let mut data = subjects(&assets, 1, 2).pop().unwrap();
    data.observations[1].params.theta[0] = 0.25;
    let dir = tempfile::tempdir().unwrap();
    data.save(dir.path()).unwrap();
    let back = SubjectDataset::load(dir.path()).unwrap();
    let params: Vec<_> = back.observations.iter().map(|o| o.params.clone()).collect();
    let want: Vec<_> = data.observations.iter().map(|o| o.params.clone()).collect();
    assert_eq!(params, want);
}

#[test]
fn ingest_errors_are_specific() {
    let (_, assets) = toy();
    let data = subjects(&assets, 1, 3).pop().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let subject = dir.path().join("s0");
    data.save(&subject).unwrap();

    std::fs::remove_file(subject.join("images/002.png")).unwrap();
    match SubjectDataset::load(&subject) {
        Err(Error::CountMismatch { cameras: 3, images: 2, .. }) => {}
        other => panic!("expected a count mismatch, got {other:?}"),
    }

    data.save(&subject).unwrap();
    let poses = format!("[{}]", std::fs::read_to_string(subject.join("pose.json")).unwrap());
    std::fs::write(subject.join("pose.json"), poses).unwrap();
    let err = SubjectDataset::load(&subject).unwrap_err();
    assert!(err.to_string().contains("1 parameter sets for 3 views"), "{err}");

    data.save(&subject).unwrap();
    std::fs::remove_dir_all(subject.join("images")).unwrap();
    assert!(matches!(SubjectDataset::load(&subject), Err(Error::MissingFile(_))));

    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(load_subjects(empty.path()), Err(Error::InvalidArgument(_))));
    assert!(matches!(load_subjects(&empty.path().join("absent")), Err(Error::MissingFile(_))));
}

#[test]
fn mismatched_image_sizes_are_rejected() {
    let (_, assets) = toy();
    let mut data = subjects(&assets, 1, 4).pop().unwrap();
    let mut obs = data.observations.pop().unwrap();
    obs.image = uvatar::render::Image::zeros(8, 8);
    data.observations.push(obs);
    assert!(matches!(SubjectDataset::new("s", data.observations), Err(Error::ShapeMismatch(_))));
    assert!(SubjectDataset::new("s", Vec::new()).is_err());
}
