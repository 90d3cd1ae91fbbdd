use slu_core::config::ExperimentConfig;
use slu_core::corpus::{generate_corpus, split_dataset, Grammar, Utterance};
use slu_core::model::checkpoint;
use slu_core::model::ModelParameters;
use slu_core::seqloss::Method;
use slu_core::trainer::{
    default_max_len, evaluate, prepare, run_plan, train_stage, transcript_free_update, Sample, Stage, StagePlan,
};

const TINY: &str = "\
enc_hidden = 6
embed_dim = 6
dec_hidden = 8
attn_dim = 6
nlu_embed_dim = 6
nlu_hidden = 6
intent_ff_dim = 6
beam_size = 2
";

struct Fixture {
    exp: ExperimentConfig,
    inventory: slu_core::corpus::Inventory,
    train: Vec<Sample>,
    dev: Vec<Sample>,
    train_utts: Vec<Utterance>,
    dev_utts: Vec<Utterance>,
    max_len: usize,
}

fn fixture() -> Fixture {
    let g = Grammar::default_grammar().compile().unwrap();
    let utts = generate_corpus(&g, 60, 3, 1.0).unwrap();
    let (tr, dv, _) = split_dataset(&utts, [0.6, 0.2, 0.2], 3).unwrap();
    let exp = ExperimentConfig::from_text(TINY).unwrap();
    let max_len = exp.resolved_max_len(default_max_len(&tr));
    Fixture {
        train: prepare(&tr, &g.inventory),
        dev: prepare(&dv, &g.inventory),
        train_utts: tr,
        dev_utts: dv,
        inventory: g.inventory,
        exp,
        max_len,
    }
}

fn init(f: &Fixture) -> ModelParameters {
    ModelParameters::init(&f.exp.model_config(&f.inventory)).unwrap()
}

#[test]
fn stages_only_touch_their_own_parameters() {
    let f = fixture();
    let p0 = init(&f);
    let cfg = f.exp.train_config(f.max_len);
    for stage in [Stage::AsrPretrain, Stage::NluTrain] {
        let (p1, _) = train_stage(&p0, &StagePlan::ce(stage, 1), &f.train, &f.dev, &f.inventory, &cfg).unwrap();
        let mut moved = 0;
        for i in 0..p0.len() {
            let same = p0.tensor(i) == p1.tensor(i);
            if stage.updates(&p0, i) {
                moved += usize::from(!same);
            } else {
                assert!(same, "{stage} changed {}", p0.names()[i]);
            }
        }
        assert!(moved > 0, "{stage} changed nothing");
    }
}

#[test]
fn training_is_a_function_of_the_seed() {
    let f = fixture();
    let p0 = init(&f);
    let mut exp = f.exp.clone();
    exp.epochs.asr_pretrain = 1;
    exp.epochs.nlu_train = 1;
    exp.epochs.joint_ce = 1;
    let cfg = exp.train_config(f.max_len);
    let a = run_plan(&p0, &exp.ce_plan(), &f.train, &f.dev, &f.inventory, &cfg).unwrap();
    let b = run_plan(&p0, &exp.ce_plan(), &f.train, &f.dev, &f.inventory, &cfg).unwrap();
    assert_eq!(checkpoint::to_bytes(&a.0), checkpoint::to_bytes(&b.0));
    assert_eq!(a.1.without_timing(), b.1.without_timing());
    let mut other = cfg.clone();
    other.seed += 1;
    let c = run_plan(&p0, &exp.ce_plan(), &f.train, &f.dev, &f.inventory, &other).unwrap();
    assert_ne!(checkpoint::to_bytes(&a.0), checkpoint::to_bytes(&c.0));
}

#[test]
fn zero_epochs_keeps_the_start() {
    let f = fixture();
    let p0 = init(&f);
    let cfg = f.exp.train_config(f.max_len);
    let (p1, log) = train_stage(&p0, &StagePlan::ce(Stage::JointCe, 0), &f.train, &f.dev, &f.inventory, &cfg).unwrap();
    assert_eq!(p0, p1);
    assert!(log.entries.is_empty());
}

#[test]
fn checkpoints_preserve_evaluation() {
    let f = fixture();
    let cfg = f.exp.train_config(f.max_len);
    let (p, _) = train_stage(&init(&f), &StagePlan::ce(Stage::JointCe, 1), &f.train, &f.dev, &f.inventory, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.ckpt");
    checkpoint::save(&p, &path).unwrap();
    let q = checkpoint::load(&path, Some(&p.config)).unwrap();
    let a = evaluate(&p, &f.dev, &f.inventory, f.max_len, cfg.execution).unwrap();
    let b = evaluate(&q, &f.dev, &f.inventory, f.max_len, cfg.execution).unwrap();
    assert_eq!(a, b);
}

#[test]
fn early_stopping_keeps_the_best_logged_epoch() {
    let f = fixture();
    let mut cfg = f.exp.train_config(f.max_len);
    cfg.lr_ce = 3e-2;
    let (p, log) = train_stage(&init(&f), &StagePlan::ce(Stage::JointCe, 3), &f.train, &f.dev, &f.inventory, &cfg).unwrap();
    let best = log.entries.iter().map(|e| e.dev.semer).fold(f64::INFINITY, f64::min);
    let kept = evaluate(&p, &f.dev, &f.inventory, f.max_len, cfg.execution).unwrap();
    assert_eq!(kept.semer, best);
}

#[test]
fn transcript_free_refuses_transcripts() {
    let f = fixture();
    let p0 = init(&f);
    let cfg = f.exp.train_config(f.max_len);
    let seq = f.exp.seq_config(Method::TranscriptFree, f.max_len);
    let plan = StagePlan::seq(Stage::TranscriptFree, 1, seq.clone());
    assert!(train_stage(&p0, &plan, &f.train, &f.dev, &f.inventory, &cfg).is_err());
    let wrong = StagePlan::seq(Stage::TranscriptFree, 1, f.exp.seq_config(Method::MSlu, f.max_len));
    assert!(train_stage(&p0, &wrong, &f.train, &f.dev, &f.inventory, &cfg).is_err());

    let sem_train: Vec<_> = f.train_utts.iter().map(|u| u.semantics(&f.inventory)).collect();
    let sem_dev: Vec<_> = f.dev_utts.iter().map(|u| u.semantics(&f.inventory)).collect();
    let (p1, log) = transcript_free_update(&p0, &sem_train, &sem_dev, &f.inventory, &seq, 1, &cfg).unwrap();
    assert_eq!(log.entries.len(), 1);
    assert!(p1.all_finite());
}

#[test]
fn sequence_loss_decreases_on_a_small_batch() {
    let f = fixture();
    let mut cfg = f.exp.train_config(f.max_len);
    let (p0, _) = train_stage(&init(&f), &StagePlan::ce(Stage::JointCe, 2), &f.train, &f.dev, &f.inventory, &cfg).unwrap();
    cfg.lr_seq = 1e-2;
    cfg.early_stopping = false;
    let batch = &f.train[..4];
    let seq = f.exp.seq_config(Method::MSlu, f.max_len);
    let (_, log) = train_stage(&p0, &StagePlan::seq(Stage::JointSeqLoss, 50, seq), batch, &f.dev[..4], &f.inventory, &cfg)
        .unwrap();
    let first = log.entries[0].train_loss;
    let last = log.entries.last().unwrap().train_loss;
    assert!(last < first, "{first} -> {last}");
}
