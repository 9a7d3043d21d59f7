use std::collections::BTreeSet;
use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use narrec_core::corpus::{
    self, build_gold, Catalog, CatalogEntry, Corpus, CorpusOptions, GoldRecord, MovieId, Submission,
};
use narrec_core::parsing::{dedup_and_cap, parse_response, ParseOptions, TitleYear};
use narrec_core::prompting::{
    build_user_prompt, parse_user_prompt, user_prompt_from_parts, PromptBuilder, Strategy,
};
use narrec_core::robustness::{
    constrain_to_pool, filter_candidates, finalize_dataset, label_all, FilterRules, LabelCache, MoviePool,
    PoolConfig, RawComment, RawDump, RawSubmission,
};
use narrec_core::runner::{
    run_plan, BackendKind, Backends, ChatRequest, CompletionError, Experiment, FnBackend, ModelSpec, RunConfig,
    RunLog, SizeCategory,
};
use proptest::prelude::*;

fn submission(id: &str, year: i32, pos: &[&str], neg: &[&str]) -> Submission {
    let ts = chrono::NaiveDate::from_ymd_opt(year, 6, 1)
        .unwrap()
        .and_hms_opt(12, 0, 0)
        .unwrap()
        .and_utc()
        .timestamp();
    Submission {
        id: id.into(),
        created_utc: ts,
        title: format!("Request {id}"),
        body: format!("Looking for something like <{id}> & more"),
        pos_movies: pos.iter().map(|s| MovieId::from(*s)).collect(),
        neg_movies: neg.iter().map(|s| MovieId::from(*s)).collect(),
        pos_keywords: BTreeSet::new(),
        neg_keywords: BTreeSet::new(),
        genres: BTreeSet::new(),
    }
}

fn catalog(n: usize) -> Catalog {
    (0..n)
        .map(|i| CatalogEntry {
            movie_id: MovieId(format!("m{i:03}")),
            release_year: 1990 + (i % 30) as i32,
            aliases: vec![format!("Movie {i}")],
        })
        .collect()
}

fn ids(range: std::ops::Range<usize>) -> Vec<MovieId> {
    range.map(|i| MovieId(format!("m{i:03}"))).collect()
}

#[test]
fn corpus_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let subs = vec![submission("a", 2020, &["m000"], &["m001"]), submission("b", 2021, &["m002"], &[])];
    let gold = vec![
        GoldRecord {
            submission_id: "a".into(),
            movie_ids: ids(0..15),
            n_comments: Some(9),
        },
        GoldRecord {
            submission_id: "b".into(),
            movie_ids: ids(2..5),
            n_comments: None,
        },
    ];
    let cat = catalog(20);
    let (sp, gp, cp) = (dir.path().join("s.jsonl"), dir.path().join("g.jsonl"), dir.path().join("c.jsonl"));
    corpus::write_submissions(&sp, &subs).unwrap();
    corpus::write_gold(&gp, &gold).unwrap();
    corpus::write_catalog(&cp, &cat).unwrap();
    assert_eq!(corpus::load_submissions(&sp).unwrap(), subs);
    assert_eq!(corpus::load_gold(&gp).unwrap(), gold);
    assert_eq!(corpus::load_catalog(&cp).unwrap(), cat);

    let c = Corpus::load(&sp, &gp, &cp, &CorpusOptions::default()).unwrap();
    assert_eq!(c.submissions.len(), 1);
    // both positive and negative mentions leave the gold set
    assert_eq!(c.gold["a"].len(), 13);
    assert_eq!(c.exclusions.len(), 1);
    assert_eq!(c.exclusions[0].reason.to_string(), "gold size 2 below minimum 10");
}

#[test]
fn malformed_line_reports_position() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.jsonl");
    std::fs::write(&p, "{\"movie_id\":\"m1\",\"year\":1999,\"aliases\":[\"A\"]}\n{\"movie_id\":\"m2\"}\n").unwrap();
    let err = corpus::load_catalog(&p).unwrap_err().to_string();
    assert!(err.contains(":2"), "{err}");
}

proptest! {
    #[test]
    fn gold_never_contains_mentions(mentions in prop::collection::btree_set(0usize..30, 1..8),
                                    recs in prop::collection::vec(0usize..30, 1..40)) {
        let names: Vec<String> = mentions.iter().map(|i| format!("m{i:03}")).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let sub = submission("x", 2020, &refs, &[]);
        let recs: Vec<MovieId> = recs.iter().map(|i| MovieId(format!("m{i:03}"))).collect();
        if let Ok(g) = build_gold(&sub, &recs) {
            for m in sub.mentioned() {
                prop_assert!(!g.items.contains(m));
            }
            prop_assert!(g.items.iter().all(|i| recs.contains(i)));
        }
    }

    #[test]
    fn user_prompt_round_trips(title in ".{0,40}", body in ".{0,200}") {
        let text = user_prompt_from_parts(&title, &body);
        prop_assert_eq!(parse_user_prompt(&text), Some((title, body)));
    }

    #[test]
    fn dedup_is_idempotent_and_caps(raw in prop::collection::vec(("[A-Ca-c]{1,3}", 1990i32..1995), 0..30),
                                    seed in any::<u64>()) {
        let entries: Vec<TitleYear> = raw.into_iter().map(|(title, year)| TitleYear { title, year }).collect();
        let once = dedup_and_cap(&entries, seed);
        let twice = dedup_and_cap(&once.entries, seed);
        prop_assert_eq!(&once.entries, &twice.entries);
        prop_assert!(once.entries.len() <= 10);
        let keys: BTreeSet<String> = once.entries.iter().map(TitleYear::key).collect();
        prop_assert_eq!(keys.len(), once.entries.len());
        // kept entries appear in their original relative order
        let mut pos = 0;
        for e in &once.entries {
            let found = entries[pos..].iter().position(|x| x == e);
            prop_assert!(found.is_some());
            pos += found.unwrap() + 1;
        }
    }

    #[test]
    fn parsing_never_panics(raw in ".{0,300}") {
        let p = parse_response(&raw, 1, ParseOptions::default());
        prop_assert!(p.entries.len() <= 10);
    }
}

#[test]
fn over_long_lists_are_capped_reproducibly() {
    let titles: Vec<String> = (0..14).map(|i| format!("\"Film {i} (2001)\"")).collect();
    let raw = format!("Sure! {{\"recommendations\": [{}]}}", titles.join(","));
    let a = parse_response(&raw, 5, ParseOptions::default());
    let b = parse_response(&raw, 5, ParseOptions::default());
    assert!(a.valid_json && a.capped && !a.had_exactly_ten);
    assert_eq!(a.entries.len(), 10);
    assert_eq!(a, b);
    assert!(!parse_response(&raw, 5, ParseOptions { strict: true }).valid_json);
}

fn model(name: &str) -> ModelSpec {
    ModelSpec {
        name: name.into(),
        family: "Stub".into(),
        size_category: SizeCategory::Tiny,
        backend: BackendKind::LocalServer,
        params_billions: None,
    }
}

#[test]
fn run_plan_resumes_and_bounds_concurrency() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("run.jsonl");
    let subs = vec![
        submission("a", 2020, &["m000"], &[]),
        submission("b", 2020, &["m000"], &[]),
        submission("c", 2021, &["m000"], &[]),
    ];
    let models = vec![model("stub")];
    let strategies = vec![Strategy::zero_shot(), Strategy::parse_id("identity:movie_critic", 0).unwrap()];
    let prompts = PromptBuilder::default();
    let exp = Experiment {
        models: &models,
        strategies: &strategies,
        submissions: &subs,
        prompts: &prompts,
        example_pool: &[],
    };
    let in_flight = Arc::new(AtomicUsize::new(0));
    let peak = Arc::new(AtomicUsize::new(0));
    let calls = Arc::new(AtomicUsize::new(0));
    let backend = {
        let (in_flight, peak, calls) = (in_flight.clone(), peak.clone(), calls.clone());
        FnBackend(move |req: &ChatRequest<'_>| {
            let now = in_flight.fetch_add(1, Ordering::SeqCst) + 1;
            peak.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(std::time::Duration::from_millis(5));
            in_flight.fetch_sub(1, Ordering::SeqCst);
            calls.fetch_add(1, Ordering::SeqCst);
            if req.user.contains("Request c") && req.cell.map(|c| c.repetition) == Some(2) {
                return Err(CompletionError::status(400, "rejected"));
            }
            Ok(r#"{"recommendations": ["Movie 1 (1991)"]}"#.into())
        })
    };
    let backends = Backends::new().with(BackendKind::LocalServer, Arc::new(backend));
    let config = RunConfig {
        max_in_flight: 2,
        ..RunConfig::default()
    };

    // a first pass over one repetition, then a crash mid-line
    let partial = RunConfig {
        repetitions: 1,
        ..config.clone()
    };
    let s1 = run_plan(&exp, &partial, &backends, &log, &|_| {}).unwrap();
    assert_eq!((s1.total_cells, s1.written), (6, 6));
    std::fs::OpenOptions::new()
        .append(true)
        .open(&log)
        .unwrap()
        .write_all(b"{\"model\":\"stub\",\"strat")
        .unwrap();

    let s2 = run_plan(&exp, &config, &backends, &log, &|_| {}).unwrap();
    assert_eq!((s2.total_cells, s2.already_present, s2.written), (18, 6, 12));
    assert_eq!(s2.failures, 2);
    assert_eq!(calls.load(Ordering::SeqCst), 18);
    assert!(peak.load(Ordering::SeqCst) <= 2);

    let loaded = RunLog::load(&log).unwrap();
    assert_eq!(loaded.rows.len(), 18);
    assert_eq!(loaded.failures(), 2);
    assert!(loaded.header.is_some());

    // nothing left to do
    let s3 = run_plan(&exp, &config, &backends, &log, &|_| {}).unwrap();
    assert_eq!(s3.written, 0);
}

#[test]
fn invalid_model_fails_before_any_request() {
    let dir = tempfile::tempdir().unwrap();
    let subs = vec![submission("a", 2020, &["m000"], &[])];
    let models = vec![ModelSpec {
        name: "has space".into(),
        ..model("x")
    }];
    let prompts = PromptBuilder::default();
    let strategies = [Strategy::zero_shot()];
    let exp = Experiment {
        models: &models,
        strategies: &strategies,
        submissions: &subs,
        prompts: &prompts,
        example_pool: &[],
    };
    let calls = Arc::new(AtomicUsize::new(0));
    let c = calls.clone();
    let backend = FnBackend(move |_: &ChatRequest<'_>| {
        c.fetch_add(1, Ordering::SeqCst);
        Ok(String::new())
    });
    let backends = Backends::new().with(BackendKind::LocalServer, Arc::new(backend));
    let log = dir.path().join("log.jsonl");
    assert!(run_plan(&exp, &RunConfig::default(), &backends, &log, &|_| {}).is_err());
    assert_eq!(calls.load(Ordering::SeqCst), 0);
    assert!(!log.exists());
}

#[test]
fn user_prompt_escapes_tags() {
    let s = submission("q", 2020, &["m000"], &[]);
    let text = build_user_prompt(&s);
    assert!(text.contains("&lt;q&gt; &amp; more"));
}

fn comments(sub: &str, scores: &[i64]) -> Vec<RawComment> {
    scores
        .iter()
        .enumerate()
        .map(|(i, &score)| RawComment {
            id: format!("{sub}-{i}"),
            link_id: format!("t3_{sub}"),
            body: format!("try Movie {i}"),
            score,
        })
        .collect()
}

#[test]
fn robustness_builder_output_loads_as_corpus() {
    let subs = vec![
        RawSubmission {
            id: "r1".into(),
            created_utc: 1_700_000_000,
            title: "[Request] like Movie 0".into(),
            selftext: "Loved Movie 0 (1990)".into(),
        },
        RawSubmission {
            id: "r2".into(),
            created_utc: 1_700_000_100,
            title: "[REQUEST] anything".into(),
            selftext: "".into(),
        },
    ];
    let mut cs = comments("r1", &[3; 6]);
    cs.extend(comments("r2", &[1; 5]));
    let dump = RawDump::new(subs, cs);
    let rules = FilterRules::default();
    let (cands, report) = filter_candidates(&dump, &rules);
    assert_eq!(report.n_candidates, 2);

    let expert = FnBackend(|req: &ChatRequest<'_>| {
        let recs: Vec<String> = (1..=12).map(|i| format!("\"Movie {i} ({})\"", 1990 + i % 30)).collect();
        if req.user.contains("like Movie 0") {
            Ok(format!(r#"{{"request_movies": ["Movie 0 (1990)"], "recommendations": [{}]}}"#, recs.join(",")))
        } else {
            Ok(r#"{"request_movies": [], "recommendations": ["Movie 3 (1993)"]}"#.into())
        }
    });
    let mut cache = LabelCache::in_memory();
    let labels = label_all(&cands, "expert", &expert, &RunConfig::default(), &mut cache).unwrap();
    let reference = catalog(30);
    let ds = finalize_dataset(&cands, &labels, Some(&reference), &rules);
    assert_eq!(ds.submissions.len(), 1);
    assert_eq!(ds.dropped.len(), 1);

    let dir = tempfile::tempdir().unwrap();
    ds.write(dir.path()).unwrap();
    let c = Corpus::load(
        &dir.path().join("submissions.jsonl"),
        &dir.path().join("gold.jsonl"),
        &dir.path().join("catalog.jsonl"),
        &CorpusOptions::default(),
    )
    .unwrap();
    assert_eq!(c.submissions.len(), 1);
    assert_eq!(c.gold["r1"].len(), 12);
    assert!(c.catalog.contains("m000"));
}

#[test]
fn pool_loop_accumulates_and_flags_shortfall() {
    let pool = MoviePool::new(catalog(15)).unwrap();
    let bundle = PromptBuilder::default()
        .bundle(&Strategy::zero_shot(), &submission("p", 2022, &["m000"], &[]), &[], 0)
        .unwrap();
    let calls = AtomicUsize::new(0);
    let stub = FnBackend(|_: &ChatRequest<'_>| {
        let n = calls.fetch_add(1, Ordering::SeqCst);
        let titles: Vec<String> = if n == 0 {
            (0..7).map(|i| format!("\"Movie {i} ({})\"", 1990 + i)).chain((0..3).map(|i| format!("\"Nope {i} (2000)\""))).collect()
        } else {
            (5..10).map(|i| format!("\"Movie {i} ({})\"", 1990 + i)).collect()
        };
        Ok(format!("{{\"recommendations\": [{}]}}", titles.join(",")))
    });
    let out = constrain_to_pool(&bundle, "m", &pool, &stub, &RunConfig::default(), &PoolConfig::default());
    assert_eq!(out.iterations, 2);
    assert_eq!(out.ids.len(), 10);
    assert!(!out.shortfall);
    let distinct: BTreeSet<_> = out.ids.iter().collect();
    assert_eq!(distinct.len(), 10);
    assert!(out.ids.iter().all(|id| pool.contains(id.as_str())));

    let never = FnBackend(|_: &ChatRequest<'_>| Ok(r#"{"recommendations": ["Elsewhere (2001)"]}"#.to_string()));
    let cfg = PoolConfig {
        max_iterations: 5,
        ..PoolConfig::default()
    };
    let out = constrain_to_pool(&bundle, "m", &pool, &never, &RunConfig::default(), &cfg);
    assert!(out.shortfall);
    assert_eq!(out.iterations, 5);
    assert!(out.ids.is_empty());
}
