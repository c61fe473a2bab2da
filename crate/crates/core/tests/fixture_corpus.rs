//! Worked examples on the bundled fixture corpus.

mod common;

use std::collections::BTreeSet;

use cdemapper_core::pipeline::{manual_search, map_values, recommend, ValueMapping};
use cdemapper_core::{Gateway, IndexBundle, PipelineConfig, Preset, SourceElement};

fn collections(names: &[&str]) -> Option<BTreeSet<String>> {
    Some(names.iter().map(|s| s.to_string()).collect())
}

fn top(bundle: &IndexBundle, name: &str, description: &str, within: &[&str]) -> Vec<String> {
    let config = PipelineConfig {
        collections: collections(within),
        ..Preset::Bm25.config()
    };
    let element = SourceElement::new("x", name, description);
    let list = recommend(&element, &config, bundle, None).unwrap();
    assert!(list.candidates.len() <= 10);
    list.candidates.into_iter().map(|c| c.tiny_id).collect()
}

#[test]
fn published_mapping_examples_rank_first() {
    let bundle = common::lexical_bundle();
    assert_eq!(top(&bundle, "Race-White", "", &["NIH-Endorsed", "NEI"])[0], "CMj2AfTik");
    assert_eq!(top(&bundle, "Imaging Modality Type", "", &["NIH-Endorsed", "NINDS"])[0], "a8ue8em4k");
    assert_eq!(top(&bundle, "Ethnicity", "", &["NIH-Endorsed", "Project 5 (COVID-19)"])[0], "hUIg2FmgY");
    assert_eq!(top(&bundle, "Evidence of Lewy body pathology", "", &["NIH-Endorsed", "NINDS"])[0], "g5HYOUY2D");
}

#[test]
fn collection_filter_picks_between_same_named_cdes() {
    let bundle = common::lexical_bundle();
    let ninds = manual_search("Lewy body pathology indicator", collections(&["NINDS"]), &bundle, &PipelineConfig::default(), None).unwrap();
    let nci = manual_search("Lewy body pathology indicator", collections(&["NCI"]), &bundle, &PipelineConfig::default(), None).unwrap();
    assert_eq!(ninds.candidates[0].tiny_id, "g5HYOUY2D");
    assert_eq!(nci.candidates[0].tiny_id, "PfLonltYe");
    assert!(ninds.candidates.iter().all(|c| c.collection == "NINDS"));
}

#[test]
fn white_maps_to_race_white_at_full_score() {
    let bundle = common::lexical_bundle();
    let race = bundle.corpus.get("CMj2AfTik").unwrap();
    let mapping = map_values(&["White".to_string(), "ASIAN".to_string()], race, &Gateway::mock());
    let ValueMapping::Available { matches } = mapping else { panic!("Race has permissible values") };
    assert_eq!(matches[0].matched_value, "White");
    assert_eq!(matches[0].score, 1.0);
    assert_eq!(matches[1].matched_value, "Asian");
}

#[test]
fn exact_names_mostly_rank_first() {
    // Length normalization can let a same-named variant with an extra
    // low-weight word win, so this is a rate rather than a rule.
    let bundle = common::lexical_bundle();
    let config = PipelineConfig::default();
    let records = bundle.corpus.records();
    let mut first = 0;
    for r in records {
        let list = manual_search(&r.name, collections(&[&r.collection]), &bundle, &config, None).unwrap();
        let top_name = list.candidates.first().map(|c| c.name.to_lowercase());
        if top_name.as_deref() == Some(r.name.to_lowercase().as_str()) {
            first += 1;
        }
    }
    let rate = first as f64 / records.len() as f64;
    eprintln!("exact-name rank-1 rate: {first}/{} = {rate:.4}", records.len());
    assert!(rate >= 0.95, "{rate}");
}

#[test]
fn embedding_preset_runs_on_the_fixture() {
    let gateway = Gateway::mock();
    let bundle = common::full_bundle(&gateway);
    let config = PipelineConfig {
        collections: collections(&["NIH-Endorsed", "NINDS"]),
        ..Preset::Bm25Emb.config()
    };
    let element = SourceElement::new("x", "Imaging Modality Type", "The type of imaging modality");
    let a = recommend(&element, &config, &bundle, Some(&gateway)).unwrap();
    let b = recommend(&element, &config, &bundle, Some(&gateway)).unwrap();
    assert_eq!(a.ids(), b.ids());
    assert!(a.ids().contains(&"a8ue8em4k"));
    assert!(a.candidates.iter().any(|c| c.vector_score.is_some()));
    assert!(a.degraded.is_empty());
}
