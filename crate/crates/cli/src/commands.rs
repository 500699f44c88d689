//! One function per subcommand. Each reads its inputs, does the work, and
//! only then moves its outputs into place.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use csit::eval::{evaluate, load_qrels, load_run, run_from_results, write_run};
use csit::index::{build_index, load_index, save_index, EmbeddingIndex};
use csit::model::{ModelConfig, Retriever, TextEmbedder};
use csit::pipeline::build_vocabulary;
use csit::robust::{
    full_context_eval, normal_eval, partial_response_eval, robust_csv, robust_table,
    ConversationalDataset, GoldResponder, HeuristicJudge, Judge, LeadSentenceResponder, LlmClient,
    LlmJudge, LlmResponder, ProtocolConfig, Responder,
};
use csit::synthetic::generate;
use csit::text::{load_corpus, load_training_jsonl, write_corpus_tsv, write_training_jsonl, Session};
use csit::trainer::{
    load_checkpoint, mine_hard_negatives, save_checkpoint, trace_csv, train_with_remining,
    Checkpoint, TrainState,
};
use csit::verify::{run_all, VerifyOptions};
use serde_json::json;

use crate::config::{Overrides, RunConfig};
use crate::output::{RunManifest, Staging};

/// Flags shared by every subcommand.
pub struct Common {
    pub config: Option<PathBuf>,
    pub overrides: Overrides,
    pub out: Option<PathBuf>,
    pub k: Option<usize>,
}

impl Common {
    fn run_config(&self) -> Result<RunConfig> {
        RunConfig::load(self.config.as_deref(), &self.overrides)
    }

    fn out(&self, command: &str) -> Result<&Path> {
        match &self.out {
            Some(p) => Ok(p),
            None => bail!("`{command}` needs --out <DIR>"),
        }
    }

    fn inputs<'a>(&'a self, paths: &[&'a Path]) -> Vec<&'a Path> {
        self.config.iter().map(PathBuf::as_path).chain(paths.iter().copied()).collect()
    }
}

fn retriever_from(checkpoint: &Path) -> Result<Retriever> {
    let ck = load_checkpoint(checkpoint)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    Ok(ck.retriever()?)
}

/// Loads an index and checks it was built by `encoder`.
fn index_for(path: &Path, encoder: &dyn TextEmbedder) -> Result<EmbeddingIndex> {
    let index = load_index(path).with_context(|| format!("loading index {}", path.display()))?;
    if index.metadata().encoder_hash != encoder.fingerprint() {
        bail!(
            "index {} was built by a different encoder ({})",
            path.display(),
            index.metadata().encoder_hash_hex()
        );
    }
    Ok(index)
}

pub fn gen_synthetic(common: &Common) -> Result<()> {
    let started = Instant::now();
    let cfg = common.run_config()?;
    let mut synth = cfg.synthetic.clone();
    if let Some(seed) = common.overrides.seed {
        synth.seed = seed;
    }
    let task = generate(&synth).map_err(anyhow::Error::msg)?;
    let mut stage = Staging::new(common.out("gen-synthetic")?)?;
    write_corpus_tsv(&stage.path("corpus.tsv"), &task.corpus)?;
    write_training_jsonl(&stage.path("train.jsonl"), &task.train)?;
    stage.write("heldout.jsonl", task.heldout.to_jsonl())?;
    stage.write("qrels.txt", task.qrels_text())?;
    let manifest = RunManifest::new("gen-synthetic", Some(synth.seed), json!({ "synthetic": synth }), &common.inputs(&[]));
    let dir = stage.commit(manifest, started)?;
    println!(
        "wrote {} passages, {} training samples, {} held-out conversations to {}",
        task.corpus.len(),
        task.train.len(),
        task.heldout.conversations.len(),
        dir.display()
    );
    Ok(())
}

pub fn train(common: &Common, data: &Path, corpus_path: &Path, mine_with: Option<&Path>) -> Result<()> {
    let started = Instant::now();
    let cfg = common.run_config()?;
    let out = common.out("train")?;
    let mut samples = load_training_jsonl(data).with_context(|| format!("loading {}", data.display()))?;
    let corpus = load_corpus(corpus_path).with_context(|| format!("loading {}", corpus_path.display()))?;
    let vocab = build_vocabulary(&samples, &corpus, cfg.max_vocab_words);
    let model = cfg.train.model_config(ModelConfig {
        vocab_size: vocab.size(),
        ..cfg.model
    });
    if let Some(path) = mine_with {
        let miner = retriever_from(path)?;
        let index = build_index(&corpus, &miner)?;
        samples = mine_hard_negatives(&samples, &corpus, &index, &miner, &cfg.train.mining(0))?.samples;
    }
    let mut state = TrainState::init(model, cfg.train.seed)?;
    let report_every = (cfg.train.steps / 20).max(1);
    let trace = train_with_remining(&mut state, &samples, &corpus, &vocab, &cfg.train, |_, row| {
        if row.step % report_every == 0 || row.step == 1 {
            log::info!("step {} L_C={:.4} L_S={:.4} L={:.4}", row.step, row.l_c, row.l_s, row.l);
        }
        Ok(())
    })?;

    let mut stage = Staging::new(out)?;
    let ck = Checkpoint {
        state,
        train_config: cfg.train.clone(),
        vocab,
    };
    save_checkpoint(&ck, &stage.path("checkpoint.csit"))?;
    stage.write("trace.csv", trace_csv(&trace))?;
    let mut inputs = common.inputs(&[data, corpus_path]);
    inputs.extend(mine_with);
    let manifest = RunManifest::new(
        "train",
        Some(cfg.train.seed),
        json!({ "run": cfg, "model": model }),
        &inputs,
    );
    let dir = stage.commit(manifest, started)?;
    if let Some(last) = trace.last() {
        println!("step {} L_C={:.5} L_S={:.5} L={:.5}", last.step, last.l_c, last.l_s, last.l);
    }
    println!("checkpoint written to {}", dir.join("checkpoint.csit").display());
    Ok(())
}

pub fn embed(common: &Common, checkpoint: &Path, passages: Option<&Path>, sessions: Option<&Path>) -> Result<()> {
    let started = Instant::now();
    let retriever = retriever_from(checkpoint)?;
    let (input, rows): (&Path, Vec<(String, Vec<f64>)>) = match (passages, sessions) {
        (Some(p), None) => {
            let corpus = load_corpus(p)?;
            let texts: Vec<&str> = corpus.iter().map(|x| x.text.as_str()).collect();
            let vectors = retriever.embed_passages(&texts)?;
            (p, corpus.into_iter().map(|x| x.pid).zip(vectors).collect())
        }
        (None, Some(s)) => {
            let ds = ConversationalDataset::load(s)?;
            let pairs = ds.sessions();
            let just: Vec<Session> = pairs.iter().map(|(_, s)| s.clone()).collect();
            let vectors = retriever.embed_sessions(&just)?;
            (s, pairs.into_iter().map(|(q, _)| q).zip(vectors).collect())
        }
        _ => bail!("pass exactly one of --passages or --sessions"),
    };
    let mut body = String::new();
    for (id, v) in &rows {
        body.push_str(&serde_json::to_string(&json!({ "id": id, "vector": v }))?);
        body.push('\n');
    }
    let mut stage = Staging::new(common.out("embed")?)?;
    stage.write("embeddings.jsonl", body)?;
    let manifest = RunManifest::new(
        "embed",
        None,
        json!({ "encoder": hex(&retriever.fingerprint()) }),
        &common.inputs(&[checkpoint, input]),
    );
    let dir = stage.commit(manifest, started)?;
    println!("embedded {} items into {}", rows.len(), dir.join("embeddings.jsonl").display());
    Ok(())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn index(common: &Common, corpus_path: &Path, checkpoint: &Path) -> Result<()> {
    let started = Instant::now();
    let retriever = retriever_from(checkpoint)?;
    let corpus = load_corpus(corpus_path)?;
    let index = build_index(&corpus, &retriever)?;
    let mut stage = Staging::new(common.out("index")?)?;
    save_index(&index, &stage.path("index.csix"))?;
    let manifest = RunManifest::new(
        "index",
        None,
        json!({ "encoder": index.metadata().encoder_hash_hex(), "passages": index.len(), "dim": index.dim() }),
        &common.inputs(&[corpus_path, checkpoint]),
    );
    let dir = stage.commit(manifest, started)?;
    println!("indexed {} passages into {}", index.len(), dir.join("index.csix").display());
    Ok(())
}

pub fn search(common: &Common, index_path: &Path, checkpoint: &Path, session_path: &Path) -> Result<()> {
    let started = Instant::now();
    let retriever = retriever_from(checkpoint)?;
    let index = index_for(index_path, &retriever)?;
    let text = std::fs::read_to_string(session_path)
        .with_context(|| format!("reading {}", session_path.display()))?;
    let session: Session = serde_json::from_str(&text)
        .with_context(|| format!("parsing session {}", session_path.display()))?;
    let k = common.k.unwrap_or(10);
    let q = retriever.embed_session(&session)?;
    let result = index.search_topk(&q, k)?;
    let run = run_from_results([(session.conversation_id.as_str(), &result)], "csit");
    let lines = write_run(&run);
    print!("{lines}");
    if let Some(out) = &common.out {
        let mut stage = Staging::new(out)?;
        stage.write("run.txt", &lines)?;
        let manifest = RunManifest::new("search", None, json!({ "k": k }), &common.inputs(&[index_path, checkpoint, session_path]));
        stage.commit(manifest, started)?;
    }
    Ok(())
}

pub fn eval(common: &Common, run_path: &Path, qrels_path: &Path) -> Result<()> {
    let started = Instant::now();
    let run = load_run(run_path)?;
    let qrels = load_qrels(qrels_path)?;
    let ks = common.k.map_or_else(|| vec![3, 10], |k| vec![k]);
    let report = evaluate(&run, &qrels, &ks);
    print!("{}", report.to_table());
    if let Some(out) = &common.out {
        let mut stage = Staging::new(out)?;
        stage.write("metrics.csv", report.to_csv())?;
        stage.write("metrics.txt", report.to_table())?;
        let manifest = RunManifest::new("eval", None, json!({ "ks": ks }), &common.inputs(&[run_path, qrels_path]));
        stage.commit(manifest, started)?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Normal,
    Partial,
    Full,
    All,
}

pub struct RobustArgs<'a> {
    pub dataset: &'a Path,
    pub qrels: &'a Path,
    pub corpus: &'a Path,
    pub checkpoint: &'a Path,
    pub index: Option<&'a Path>,
    pub protocol: Protocol,
    pub llm: bool,
    pub gold_responses: bool,
}

pub fn robust_eval(common: &Common, args: &RobustArgs) -> Result<()> {
    let started = Instant::now();
    let cfg = common.run_config()?;
    let out = common.out("robust-eval")?;
    let retriever = retriever_from(args.checkpoint)?;
    let dataset = ConversationalDataset::load(args.dataset)?;
    let qrels = load_qrels(args.qrels)?;
    let corpus = load_corpus(args.corpus)?;
    let index = match args.index {
        Some(p) => index_for(p, &retriever)?,
        None => build_index(&corpus, &retriever)?,
    };
    let mut ks = vec![3];
    if let Some(k) = common.k.filter(|&k| k != 3) {
        ks.push(k);
    }
    let pcfg = ProtocolConfig {
        ks,
        response_passages: 3,
        seed: cfg.train.seed,
    };
    let llm_config = match (args.llm, &cfg.llm) {
        (false, _) => None,
        (true, Some(c)) => Some(c.clone()),
        (true, None) => bail!("--llm needs an [llm] section in the config file"),
    };
    let (judge, responder): (Box<dyn Judge>, Box<dyn Responder>) = match &llm_config {
        Some(c) => (
            Box::new(LlmJudge::new(LlmClient::new(c.clone())?)),
            Box::new(LlmResponder {
                client: LlmClient::new(c.clone())?,
            }),
        ),
        None if args.gold_responses => (Box::new(HeuristicJudge), Box::new(GoldResponder)),
        None => (Box::new(HeuristicJudge), Box::new(LeadSentenceResponder)),
    };
    let wants = |p: Protocol| args.protocol == p || args.protocol == Protocol::All;

    let mut stage = Staging::new(out)?;
    let normal = if wants(Protocol::Normal) {
        let (run, report) = normal_eval(&retriever, &index, &dataset, &qrels, &pcfg)?;
        stage.write("normal.run", write_run(&run))?;
        Some(report)
    } else {
        None
    };
    let partial = if wants(Protocol::Partial) {
        let p = partial_response_eval(
            &retriever, &index, &corpus, &dataset, &qrels, judge.as_ref(), responder.as_ref(), &pcfg,
        )?;
        stage.write("partial.run", write_run(&p.run))?;
        if p.fallbacks > 0 {
            log::warn!("{} responses came from the fallback generator", p.fallbacks);
        }
        Some(p)
    } else {
        None
    };
    let full = if wants(Protocol::Full) {
        let f = full_context_eval(&retriever, &index, &dataset, &qrels, &pcfg)?;
        for (i, run) in f.runs.iter().enumerate() {
            stage.write(&format!("variant_{i}.run"), write_run(run))?;
        }
        Some(f)
    } else {
        None
    };
    let csv = robust_csv(&dataset.name, normal.as_ref(), partial.as_ref(), full.as_ref());
    let table = robust_table(&dataset.name, normal.as_ref(), partial.as_ref(), full.as_ref());
    stage.write("report.csv", &csv)?;
    stage.write("report.txt", &table)?;
    let manifest = RunManifest::new(
        "robust-eval",
        Some(cfg.train.seed),
        json!({
            "protocol": args.protocol,
            "ks": pcfg.ks,
            "responder": if llm_config.is_some() { "llm" } else if args.gold_responses { "gold" } else { "lead_sentence" },
            "llm": llm_config,
        }),
        &common.inputs(&[args.dataset, args.qrels, args.corpus, args.checkpoint]),
    );
    stage.commit(manifest, started)?;
    print!("{table}");
    Ok(())
}

pub fn verify(common: &Common, quick: bool) -> Result<()> {
    let started = Instant::now();
    let mut opts = VerifyOptions {
        seed: common.overrides.seed.unwrap_or(0),
        ..VerifyOptions::default()
    };
    if quick {
        opts.mask_cases = 20;
        opts.two_pass_cases = 20;
    }
    let report = run_all(&opts);
    let table = report.to_table();
    print!("{table}");
    if let Some(out) = &common.out {
        let mut stage = Staging::new(out)?;
        stage.write("verify.txt", &table)?;
        let manifest = RunManifest::new("verify", Some(opts.seed), json!({ "quick": quick }), &common.inputs(&[]));
        stage.commit(manifest, started)?;
    }
    if !report.all_passed() {
        bail!("verification failed");
    }
    Ok(())
}
