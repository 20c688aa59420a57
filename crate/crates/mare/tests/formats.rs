use mare::checkpoint::Checkpoint;
use mare::jsonl::{load_jsonl, parse_jsonl, save_jsonl, JsonlError};
use mare::report::{ReportDocument, SummaryTable};
use mare_core::data::{synth_generate, SynthGrammarConfig, Vocab};
use mare_core::eval::{Aggregation, AspectMetrics, Prf, RationaleReport, RunMetadata};
use mare_core::model::{Mare, MareConfig};

#[test]
fn jsonl_round_trip() {
    let cfg = SynthGrammarConfig::with_default_vocab(3, 2);
    let mut ds = synth_generate(&cfg, 20).unwrap();
    ds.examples[3].labels[1] = None;
    ds.examples[3].rationales[1] = None;
    ds.examples[4].rationales = vec![None; 3];
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    save_jsonl(&ds, &path).unwrap();
    let back = load_jsonl(&path, Some(3)).unwrap();
    assert_eq!(back, ds);
    let inferred = load_jsonl(&path, None).unwrap();
    assert_eq!(inferred.num_aspects, 3);
}

#[test]
fn jsonl_error_names_line_and_field() {
    let good = r#"{"tokens": ["a", "b"], "labels": {"0": 1}, "rationales": {"0": [0, 1]}}"#;
    let mut lines = vec![good; 6];
    lines.push(r#"{"tokens": ["a", "b"], "labels": {"0": 1}, "rationales": {"0": [0, 1, 1]}}"#);
    match parse_jsonl(&lines.join("\n"), Some(1)) {
        Err(JsonlError::Schema { line, field, .. }) => {
            assert_eq!(line, 7);
            assert_eq!(field, "rationales.0");
        }
        other => panic!("{other:?}"),
    }
    lines[6] = r#"{"tokens": ["a"], "labels": {"0": -1}}"#;
    let err = parse_jsonl(&lines.join("\n"), Some(1)).unwrap_err().to_string();
    assert!(err.contains("line 7") && err.contains("labels.0"), "{err}");
    lines[6] = r#"{"tokens": ["a"], "labels": {"x": 1}}"#;
    let err = parse_jsonl(&lines.join("\n"), Some(1)).unwrap_err().to_string();
    assert!(err.contains("labels.x"), "{err}");
    lines[6] = r#"{"tokens": ["a"], "labels": {"0": 1}, "extra": 3}"#;
    assert!(parse_jsonl(&lines.join("\n"), Some(1)).is_err());
    lines[6] = r#"{"tokens": ["a"], "labels": {"0": 1}, "rationales": {"0": [2]}}"#;
    let err = parse_jsonl(&lines.join("\n"), Some(1)).unwrap_err().to_string();
    assert!(err.contains("rationales.0[0]"), "{err}");
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.jsonl");
    std::fs::write(&path, "\n\n").unwrap();
    assert!(matches!(load_jsonl(&path, Some(1)), Err(JsonlError::Empty { .. })));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut cfg = MareConfig::toy(7, 5, 2);
    cfg.encoder.model_dim = 8;
    cfg.encoder.num_heads = 2;
    cfg.encoder.ffn_dim = 8;
    let model = Mare::new(cfg, 12).unwrap();
    let vocab = Vocab::from_tokens(["[UNK]", "a", "b", "c", "d", "e", "f"].map(String::from).to_vec());
    let names = vec!["look".to_string(), "smell".to_string()];
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    Checkpoint::from_model(&model, &vocab, &names).save(&path).unwrap();
    let (back, v2, n2) = Checkpoint::load(&path).unwrap().into_model().unwrap();
    assert_eq!(back.config(), model.config());
    assert_eq!(n2, names);
    assert_eq!(v2.tokens(), vocab.tokens());
    assert_eq!(v2.id("c"), 3);
    for (a, b) in model.params().tensors().iter().zip(back.params().tensors()) {
        assert_eq!(a.shape(), b.shape());
        let bits = |t: &mare_core::Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
    let ids = vec![vec![1, 2, 3, 4, 5]];
    let x = model.infer(&ids, &[0, 1]).unwrap();
    let y = back.infer(&ids, &[0, 1]).unwrap();
    assert_eq!(x.logits, y.logits);
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, "{\"format\": \"something-else\"}").unwrap();
    assert!(Checkpoint::load(&path).and_then(|c| c.into_model()).is_err());
}

fn report() -> RationaleReport {
    let prf = |p: f64, r: f64| Prf {
        precision: p,
        recall: r,
        f1: 2.0 * p * r / (p + r),
    };
    RationaleReport {
        metadata: RunMetadata {
            seed: 3,
            config_hash: "00ff".into(),
            mode: "multitask".into(),
        },
        aggregation: Aggregation::Micro,
        aspects: vec![
            AspectMetrics {
                aspect: 0,
                sparsity: 0.1234,
                accuracy: Some(0.95),
                prf: Some(prf(0.8, 0.7)),
                labelled: 10,
                annotated: 10,
            },
            AspectMetrics {
                aspect: 1,
                sparsity: 0.2,
                accuracy: None,
                prf: None,
                labelled: 0,
                annotated: 0,
            },
        ],
        examples: vec![],
        diagnostics: None,
    }
}

#[test]
fn report_json_csv_json_round_trip() {
    let names = vec!["appearance".to_string(), "aroma".to_string()];
    let doc = ReportDocument::new(report(), &names);
    let json = doc.render(mare::report::Format::Json).unwrap();
    let parsed: ReportDocument = serde_json::from_str(&json).unwrap();
    assert_eq!(parsed.report, doc.report);
    let csv = parsed.table.to_csv().unwrap();
    let table = SummaryTable::from_csv(&csv).unwrap();
    assert_eq!(table, doc.table);
    let again = ReportDocument {
        table,
        report: parsed.report,
    };
    assert_eq!(again.render(mare::report::Format::Json).unwrap(), json);
    assert_eq!(doc.table.aspects[0].values[0], Some(12.3));
    let header = doc.table.header();
    assert_eq!(header.first().unwrap(), "appearance S");
    assert_eq!(header.last().unwrap(), "Avg F1");
    let md = doc.render(mare::report::Format::Markdown).unwrap();
    assert!(md.contains(" - "));
}
