mod common;

use common::random_graph;
use triplecheck::kg::{load_graph, load_labels, write_graph, write_labels};
use triplecheck::{corrupt, CorruptionMode, Error};

#[test]
fn write_then_load_is_id_identical() {
    let dir = tempfile::tempdir().unwrap();
    for seed in 0..10 {
        let g = random_graph(seed, 30, 4, 100);
        let p = dir.path().join(format!("g{seed}.tsv"));
        write_graph(&g, &p).unwrap();
        let back = load_graph(&p, None).unwrap();
        assert_eq!(back.triples(), g.triples());
        assert_eq!(back.entity_names(), g.entity_names());
        assert_eq!(back.relation_names(), g.relation_names());
        // loading twice assigns the same ids
        assert_eq!(load_graph(&p, None).unwrap().triples(), back.triples());
    }
}

#[test]
fn labels_follow_deduplicated_order() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("g.tsv");
    std::fs::write(&p, "a\tr\tb\na\tr\tb\nb\tr\tc\n").unwrap();
    let l = dir.path().join("g.labels");
    std::fs::write(&l, "0\n1\n").unwrap();
    let g = load_graph(&p, Some(&l)).unwrap();
    assert_eq!(g.len(), 2);
    assert_eq!(g.duplicates_dropped(), 1);
    assert_eq!(g.error_flags(), Some(&[false, true][..]));
    std::fs::write(&l, "0\n1\n1\n").unwrap();
    assert!(matches!(load_graph(&p, Some(&l)), Err(Error::Format(_))));
}

#[test]
fn noisy_graph_round_trips_with_labels() {
    let dir = tempfile::tempdir().unwrap();
    let g = random_graph(4, 40, 5, 200);
    let (noisy, _) = corrupt::inject_errors(&g, 0.1, CorruptionMode::SamePosition, 7).unwrap();
    let (p, l) = (dir.path().join("n.tsv"), dir.path().join("n.labels"));
    write_graph(&noisy, &p).unwrap();
    write_labels(noisy.error_flags().unwrap(), &l).unwrap();
    let back = load_graph(&p, Some(&l)).unwrap();
    assert_eq!(back.triples(), noisy.triples());
    assert_eq!(back.error_flags(), noisy.error_flags());
    assert_eq!(load_labels(&l).unwrap().len(), noisy.len());
}

#[test]
fn missing_file_names_the_path() {
    let err = load_graph(std::path::Path::new("/nonexistent/kg.tsv"), None).unwrap_err();
    assert!(err.to_string().contains("/nonexistent/kg.tsv"), "{err}");
}
