use std::collections::HashMap;

use proptest::prelude::*;

use hfalign_core::config::{CorrectionConfig, ReviewMode};
use hfalign_core::promptgen::RefinerClient;
use hfalign_core::{ExperimentConfig, IdGen, Label, Oracle, Prompt, StageTag, Store, Video, VideoSource};
use hfalign_pipeline::correction::{
    conservation_audit, Correction, FixedClock, OracleAdjudicator, OracleCritics, OracleReviewer, Stage,
};
use hfalign_pipeline::experiment::{make_prompts, reference_corpus};

struct Fixture {
    store: Store,
    oracle: Oracle,
    videos: HashMap<String, Video>,
    prompts: HashMap<String, Prompt>,
}

fn fixture(store: Store, prompts: usize) -> Fixture {
    let mut cfg = ExperimentConfig::default();
    cfg.data.prompts = prompts;
    let oracle = cfg.oracle().unwrap();
    let (ps, _) = make_prompts(&cfg, 21, &RefinerClient::fallback_only()).unwrap();
    let mut vs = reference_corpus(&cfg, &ps, 2, 22).unwrap();
    let mut ids = IdGen::seeded(23);
    for p in &ps {
        store.put_prompt(p.clone()).unwrap();
    }
    for v in &mut vs {
        v.source = VideoSource::Synthesized;
        store.put_video(v.clone()).unwrap();
        for a in oracle.annotate(v, &ps.iter().find(|p| p.id == v.prompt_id).unwrap().clone(), &mut ids).unwrap() {
            store.put_annotation(a).unwrap();
        }
    }
    Fixture {
        store,
        oracle,
        videos: vs.into_iter().map(|v| (v.id.clone(), v)).collect(),
        prompts: ps.into_iter().map(|p| (p.id.clone(), p)).collect(),
    }
}

fn run(f: &Fixture, seed: u64) -> Stage {
    let clock = FixedClock("t0".into());
    let c = Correction::new(&f.store, CorrectionConfig::default(), &clock, seed);
    let rev = OracleReviewer { oracle: f.oracle.clone(), mode: ReviewMode::Check };
    c.run_all(&OracleCritics(f.oracle.clone()), &OracleAdjudicator(f.oracle.clone()), &rev).unwrap().stage
}

fn matches_oracle(f: &Fixture) -> bool {
    f.store.annotations().iter().filter(|a| a.stage_tag.is_active()).all(|a| {
        let v = &f.videos[&a.video_id];
        a.label == f.oracle.labels(v, &f.prompts[&v.prompt_id]).unwrap()[a.dimension.index()]
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    /// Whatever labels get corrupted, oracle roles restore them and nothing
    /// is lost on the way.
    #[test]
    fn oracle_roles_repair_flipped_labels(flips in proptest::collection::vec((0usize..1000, 0u8..2), 0..12), seed in 0u64..1000) {
        let f = fixture(Store::in_memory(), 8);
        let anns = f.store.annotations();
        for (i, shift) in flips {
            let mut a = anns[i % anns.len()].clone();
            a.label = match (a.label, shift) {
                (Label::Good, 0) | (Label::Bad, 1) => Label::Normal,
                (Label::Normal, 0) | (Label::Good, 1) => Label::Bad,
                _ => Label::Good,
            };
            f.store.put_annotation(a).unwrap();
        }
        prop_assert_eq!(run(&f, seed), Stage::Done);
        prop_assert!(matches_oracle(&f));
        let audit = conservation_audit(&f.store);
        prop_assert!(audit.ok, "{:?}", audit);
        prop_assert_eq!(audit.raw, anns.len());
    }
}

#[test]
fn correction_resumes_from_the_persisted_store() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("store.jsonl");
    let f = fixture(Store::open(&path).unwrap(), 6);
    let clock = FixedClock("t0".into());
    Correction::new(&f.store, CorrectionConfig::default(), &clock, 4).coarse().unwrap();
    f.store.flush().unwrap();
    drop(f.store);

    let store = Store::open(&path).unwrap();
    let f = Fixture { store, ..fixture(Store::in_memory(), 6) };
    assert_eq!(Correction::new(&f.store, CorrectionConfig::default(), &clock, 4).state().unwrap().stage, Stage::RefineA);
    assert_eq!(run(&f, 4), Stage::Done);
    assert!(matches_oracle(&f));
    assert!(conservation_audit(&f.store).ok);
    assert!(f.store.annotations().iter().all(|a| a.stage_tag == StageTag::Kept));
}
