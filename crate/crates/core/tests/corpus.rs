use std::fs;

use ctrlkit::corpus::*;
use ctrlkit::synthetic::{two_domain_assets, two_domain_documents, FORWARD_DOMAIN, REVERSED_DOMAIN};
use ctrlkit::tokenizer::UNKNOWN_ID;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn thousand_random_records_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let l = 17;
    let records: Vec<SequenceRecord> = (0..1000)
        .map(|i| SequenceRecord {
            tokens: (0..l).map(|_| rng.random()).collect(),
            domain: format!("domain-{}", i % 7),
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.bin");
    write_records_file(&path, l, &records).unwrap();
    let (ctx, back) = read_records_file(&path).unwrap();
    assert_eq!(ctx, l);
    assert_eq!(back, records);
}

fn write_corpus(dir: &std::path::Path) -> (TextAssets, Vec<(&'static str, String)>) {
    let docs = two_domain_documents(5, 6, 60);
    let assets = two_domain_assets(&docs, 300).unwrap();
    let mut manifest = String::from("# domain\tpath\n");
    for (i, (domain, text)) in docs.iter().enumerate() {
        let name = format!("doc{i}.txt");
        fs::write(dir.join(&name), text).unwrap();
        manifest.push_str(&format!("{domain}\t{name}\n"));
    }
    fs::write(dir.join("manifest.tsv"), manifest).unwrap();
    (assets, docs)
}

#[test]
fn manifest_build_invariants() {
    let dir = tempfile::tempdir().unwrap();
    let (assets, docs) = write_corpus(dir.path());
    let text = fs::read_to_string(dir.path().join("manifest.tsv")).unwrap();
    let manifest = parse_manifest(&text, dir.path(), &assets.registry).unwrap();
    assert_eq!(manifest.len(), docs.len());
    let l = 24;
    let build = build_from_manifest(&assets, &manifest, l).unwrap();

    for r in build.train.iter().chain(&build.valid) {
        assert_eq!(r.tokens.len(), l);
        assert_eq!(assets.registry.name_of(r.tokens[0]), Some(r.domain.as_str()));
        assert!(r.tokens.iter().filter(|&&t| t == UNKNOWN_ID).count() <= MAX_UNKNOWNS);
    }

    // Contents per domain reproduce a prefix of the domain's stream.
    for domain in [FORWARD_DOMAIN, REVERSED_DOMAIN] {
        let stream: Vec<u32> = docs
            .iter()
            .filter(|d| d.0 == domain)
            .flat_map(|d| assets.tokenizer.encode(&d.1))
            .collect();
        let content: Vec<u32> = build
            .train
            .iter()
            .chain(&build.valid)
            .filter(|r| r.domain == domain)
            .flat_map(|r| r.content().to_vec())
            .collect();
        assert!(stream.len() - content.len() < l - 1);
        assert_eq!(&stream[..content.len()], &content[..]);
        let stats = &build.stats[domain];
        assert_eq!(stats.filtered, 0);
        assert_eq!(stats.records, stats.train + stats.valid);
        assert!(stats.valid >= 1);
    }

    let again = build_from_manifest(&assets, &manifest, l).unwrap();
    assert_eq!(again.train, build.train);
    assert_eq!(again.valid, build.valid);
}

#[test]
fn manifest_errors_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let (assets, _) = write_corpus(dir.path());
    let bad_code = "Forward\tdoc0.txt\nNope\tdoc1.txt\n";
    let err = parse_manifest(bad_code, dir.path(), &assets.registry).unwrap_err();
    assert!(err.to_string().contains("line 2"), "{err}");
    let missing = "Forward\tmissing.txt\n";
    assert!(parse_manifest(missing, dir.path(), &assets.registry).is_err());
}

#[test]
fn annotations_place_secondary_codes() {
    let dir = tempfile::tempdir().unwrap();
    let mut registry = ControlCodeRegistry::new();
    registry.add_domain("Reviews").unwrap();
    registry.add_secondary("Rating:").unwrap();
    registry.add_secondary("5.0").unwrap();
    let text = "great book loved it";
    let tokenizer = ctrlkit::tokenizer::Tokenizer::learn([text], &registry.names(), 10, 1).unwrap();
    let assets = TextAssets { tokenizer, registry };
    fs::write(dir.path().join("r.txt"), text).unwrap();
    let manifest = parse_manifest("Reviews\tr.txt\tRating:@0,5.0@0\n", dir.path(), &assets.registry).unwrap();
    let build = build_from_manifest(&assets, &manifest, 4).unwrap();
    let first = build.train.first().unwrap();
    assert_eq!(first.tokens[0], assets.registry.id("Reviews").unwrap());
    assert_eq!(first.tokens[1], assets.registry.id("Rating:").unwrap());
    assert_eq!(first.tokens[2], assets.registry.id("5.0").unwrap());
}
