use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::SnippetAnnotation;
use crate::model::ModelConfig;

fn vocab() -> Vocabulary {
    Vocabulary::from_tokens((0..16).map(|i| format!("w{i}"))).unwrap()
}

fn labels() -> LabelSpace {
    LabelSpace {
        actions: vec!["open".into(), "close".into()],
        objects: vec!["door".into(), "fridge".into()],
        pseudo_labels: vec!["kitchen".into()],
    }
}

fn config() -> ModelConfig {
    ModelConfig { max_sentence_len: 6, ..ModelConfig::tiny() }
}

fn video(seed: u64, frames: usize, snippets: usize) -> VideoRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = config();
    let per = frames / snippets.max(1);
    VideoRecord {
        id: format!("vid{seed}"),
        num_frames: frames,
        feature_dim: cfg.feature_dim,
        features: (0..frames * cfg.feature_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        snippets: (0..snippets)
            .map(|k| SnippetAnnotation {
                start_frame: k * per,
                end_frame: (k + 1) * per,
                caption: format!("w{k} w{}", k + 1),
                action_labels: vec![1, 0],
                object_labels: vec![0, 1],
                pseudo_labels: vec![0],
                explicit_knowledge: None,
                implicit_knowledge: None,
            })
            .collect(),
    }
}

fn model(seed: u64) -> Model<f32> {
    Model::new(config(), seed).unwrap()
}

fn set_selector_bias(m: &mut Model<f32>, v: f32) {
    m.param_mut("selector.3.w").unwrap().data_mut().fill(0.0);
    m.param_mut("selector.3.b").unwrap().data_mut().fill(v);
}

#[test]
fn argmax_breaks_ties_toward_the_lowest_id() {
    assert_eq!(argmax(&[1.0f32, 3.0, 3.0, 2.0]), 1);
    assert_eq!(argmax(&[0.5f64; 4]), 0);
}

#[test]
fn certain_eos_gives_an_empty_sentence() {
    let mut m = model(1);
    m.param_mut("decoder.output.w").unwrap().data_mut().fill(0.0);
    let b = m.param_mut("decoder.output.b").unwrap().data_mut();
    b.fill(0.0);
    b[EOS] = 50.0;
    let encoded = Tensor::zeros(&[3, config().d_model]);
    assert!(generate_sentence(&m, &encoded).unwrap().is_empty());
}

#[test]
fn sentences_stop_at_the_length_cap() {
    let mut m = model(1);
    m.param_mut("decoder.output.w").unwrap().data_mut().fill(0.0);
    let b = m.param_mut("decoder.output.b").unwrap().data_mut();
    b.fill(0.0);
    b[7] = 50.0;
    let encoded = Tensor::zeros(&[3, config().d_model]);
    assert_eq!(generate_sentence(&m, &encoded).unwrap(), vec![7; 6]);
}

#[test]
fn generation_is_deterministic() {
    let m = model(2);
    let v = video(3, 6, 3);
    let run = || generate_paragraph(&m, &v, &vocab(), &Providers::null(), Mode::GtProposals, &Default::default()).unwrap();
    assert_eq!(run(), run());
}

#[test]
fn weak_selector_yields_an_empty_paragraph() {
    let mut m = model(4);
    set_selector_bias(&mut m, -20.0);
    let out = generate_paragraph(&m, &video(5, 6, 2), &vocab(), &Providers::null(), Mode::Free, &Default::default()).unwrap();
    assert!(out.is_empty());
}

#[test]
fn confident_selector_fills_the_snippet_cap() {
    let mut m = model(4);
    set_selector_bias(&mut m, 20.0);
    let out = generate_paragraph(&m, &video(5, 6, 2), &vocab(), &Providers::null(), Mode::Free, &Default::default()).unwrap();
    assert_eq!(out.len(), 20);
    assert_eq!(out.masks.len(), 20);
    assert_eq!(out.actobj.len(), 20);
    assert_eq!(out.contexts.len(), 20);
}

#[test]
fn ground_truth_proposals_emit_one_sentence_per_segment() {
    let mut m = model(6);
    set_selector_bias(&mut m, -20.0);
    let out =
        generate_paragraph(&m, &video(7, 9, 3), &vocab(), &Providers::null(), Mode::GtProposals, &Default::default()).unwrap();
    assert_eq!(out.len(), 3);
}

#[test]
fn hidden_context_embeds_the_previous_generated_sentence() {
    let providers = Providers::toy();
    let m = model(8);
    let out = generate_paragraph(&m, &video(9, 8, 4), &vocab(), &providers, Mode::GtProposals, &Default::default()).unwrap();
    assert_eq!(out.contexts[0], KnowledgeContext::zeros());
    for i in 1..out.len() {
        let prev = vocab().decode(&out.sentences[i - 1]);
        assert_eq!(out.contexts[i].h, providers.embedder.embed(&prev));
    }
}

#[test]
fn too_long_videos_are_rejected() {
    let cfg = ModelConfig { max_frames: 4, ..config() };
    let m: Model<f32> = Model::new(cfg, 0).unwrap();
    assert!(generate_paragraph(&m, &video(1, 6, 2), &vocab(), &Providers::null(), Mode::Free, &Default::default()).is_err());
}

#[test]
fn threshold_rounds_half_up() {
    assert_eq!(threshold(&[0.5, 0.49999, 0.9, 0.0]), vec![1, 0, 1, 0]);
}

#[test]
fn documents_round_trip_and_describe_frame_ranges() {
    let output = GenerationOutput {
        sentences: vec![vec![4, 5], vec![]],
        masks: vec![vec![0.1, 0.7, 0.5, 0.2], vec![0.0; 4]],
        actobj: vec![vec![0.9, 0.1, 0.2, 0.8, 0.6], vec![0.0; 5]],
        contexts: vec![KnowledgeContext::zeros(); 2],
    };
    let doc = VideoDoc::from_output("v", &output, &vocab(), &labels(), &GenerationOptions::default());
    assert_eq!(doc.snippets[0].frame_range, Some([1, 3]));
    assert_eq!(doc.snippets[0].caption, "w0 w1");
    assert_eq!(doc.snippets[0].top_actobj, vec!["open", "fridge", "kitchen"]);
    assert_eq!(doc.snippets[0].actobj, vec![1, 0, 0, 1, 1]);
    assert_eq!(doc.snippets[1].frame_range, None);
    assert_eq!(doc.paragraph(), "w0 w1");

    let docs = GenerationDocs { mode: Mode::Free, videos: vec![doc] };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.json");
    docs.save(&path).unwrap();
    assert_eq!(GenerationDocs::load(&path).unwrap(), docs);
}

#[test]
fn modes_parse_and_print() {
    for m in [Mode::Free, Mode::GtProposals] {
        assert_eq!(m.to_string().parse::<Mode>().unwrap(), m);
    }
    assert!("beam".parse::<Mode>().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]
    #[test]
    fn paragraphs_never_exceed_the_cap(seed in 0u64..1000, bias in -3.0f32..6.0) {
        let mut m = model(seed);
        m.param_mut("selector.3.b").unwrap().data_mut().fill(bias);
        let out = generate_paragraph(&m, &video(seed, 5, 1), &vocab(), &Providers::null(), Mode::Free, &Default::default()).unwrap();
        prop_assert!(out.len() <= 20);
        prop_assert!(out.sentences.iter().all(|s| s.len() <= 6));
    }
}
