use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use lorawhisper::bank::{save_base, Provenance};
use lorawhisper::evaluation::{evaluate, EvalMeta, EvalReport, Routing};
use lorawhisper::expansion::Mode;
use lorawhisper::experiment::{
    expand_all, joint_finetune, language_manifests, new_language_finetune, per_language_finetune, pretrain_base,
    resolve_donors, similarity_profile, train_bank, DonorChoice, ExperimentConfig, Role, Suite,
};
use lorawhisper::lora::{count_lora_params, AttachmentPolicy, ModelDims};
use lorawhisper::synth::UtteranceRecord;
use lorawhisper::training::TrainReport;
use lorawhisper::{BaseWeights, LanguageId};
use serde_json::json;

use crate::exit::CliError;
use crate::run_dir::{non_empty, RunDir};

pub fn load_config(path: Option<&PathBuf>, preset: &str, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => {
            if !p.exists() {
                return Err(CliError::Missing(p.clone()).into());
            }
            serde_json::from_str(&fs::read_to_string(p)?).with_context(|| format!("parsing {}", p.display()))?
        }
        None => ExperimentConfig::preset(preset)?,
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_log(run: &RunDir, name: &str, report: &TrainReport) -> Result<()> {
    run.write(&format!("logs/{name}.jsonl"), report.to_jsonl())?;
    Ok(())
}

fn last_loss(report: &TrainReport) -> String {
    report.epoch_losses.last().map_or("n/a".into(), |l| format!("{l:.4}"))
}

pub fn gen_data(cfg: &ExperimentConfig, run: &RunDir, dump: bool) -> Result<()> {
    if non_empty(&run.root) && !run.force {
        return Err(CliError::Exists(run.root.clone()).into());
    }
    let manifests = language_manifests(cfg)?;
    run.write_json("config.json", cfg)?;
    run.write_json("data/manifests.json", &manifests)?;
    if dump {
        let eot = cfg.model.special().eot;
        for m in &manifests {
            let data = m.materialize(eot)?;
            for (split, utts) in [("train", &data.train), ("test", &data.test)] {
                let mut out = String::new();
                for u in utts {
                    let rec = UtteranceRecord { lang: &u.lang.code, source: &u.source, text: &u.text };
                    out += &(serde_json::to_string(&rec)? + "\n");
                }
                run.write(&format!("data/{}-{split}.jsonl", m.spec.lang.code), out)?;
            }
        }
    }
    let n_new = manifests.iter().filter(|m| m.role == Role::New).count();
    eprintln!("wrote {} base + {n_new} new language manifests to {}", manifests.len() - n_new, run.root.display());
    Ok(())
}

pub fn train_base_cmd(run: &RunDir) -> Result<()> {
    let cfg = run.config()?;
    let suite = run.suite(&cfg)?;
    let out = run.claim("base.lwbk")?;
    let (base, log) = pretrain_base(&cfg, &suite)?;
    save_base(&base, &out)?;
    write_log(run, "base", &log)?;
    eprintln!("base: {} params, final loss {}, fingerprint {}", base.num_params(), last_loss(&log), hex(&base));
    Ok(())
}

fn hex(base: &BaseWeights) -> String {
    base.fingerprint().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

pub fn train_bank_cmd(run: &RunDir, rank: Option<usize>) -> Result<()> {
    let mut cfg = run.config()?;
    if let Some(r) = rank {
        cfg.rank = r;
    }
    let suite = run.suite(&cfg)?;
    let base = run.base("base.lwbk", &cfg)?;
    let out = run.claim("bank.lwbk")?;
    run.claim("bank.manifest.json")?;
    let (bank, logs) = train_bank(&cfg, &base, &suite)?;
    bank.save(&out)?;
    run.write_json("bank.manifest.json", &bank.manifest(Provenance { seed: cfg.seed, config_hash: cfg.hash() }))?;
    for (code, log) in &logs {
        write_log(run, &format!("bank-{code}"), log)?;
        eprintln!("bank {code}: final loss {}", last_loss(log));
    }
    eprintln!("bank: {} languages, {} adapter params", bank.len(), bank.num_params());
    Ok(())
}

fn new_codes(suite: &Suite) -> Vec<String> {
    suite.role(Role::New).map(|l| l.id().code.clone()).collect()
}

pub fn similarity_cmd(run: &RunDir, langs: &[String]) -> Result<()> {
    let cfg = run.config()?;
    let suite = run.suite(&cfg)?;
    let base = run.base("base.lwbk", &cfg)?;
    let codes = if langs.is_empty() { new_codes(&suite) } else { langs.to_vec() };
    run.claim("reports/similarity.json")?;
    let mut profiles = BTreeMap::new();
    for code in &codes {
        let p = similarity_profile(&cfg, &base, &suite, code)?;
        let sims: Vec<String> = p.base_languages.iter().zip(&p.sim).map(|(l, s)| format!("{}={s:.2}", l.code)).collect();
        println!("{code} -> {} ({})", p.argmax_language.code, sims.join(" "));
        profiles.insert(code.clone(), p);
    }
    run.write_json("reports/similarity.json", &profiles)?;
    Ok(())
}

pub struct ExpandArgs {
    pub mode: Mode,
    pub donor: DonorChoice,
    pub rank: Option<usize>,
    pub bank_in: String,
    pub bank_out: Option<String>,
}

pub fn expand_cmd(run: &RunDir, args: &ExpandArgs) -> Result<String> {
    let mut cfg = run.config()?;
    if let Some(r) = args.rank {
        cfg.rank = r;
    }
    let suite = run.suite(&cfg)?;
    let base = run.base("base.lwbk", &cfg)?;
    let bank = run.bank(&args.bank_in, &base)?;
    let out_rel = args.bank_out.clone().unwrap_or_else(|| format!("bank-{}.lwbk", args.mode));
    let out = run.claim(&out_rel)?;
    let report_rel = format!("reports/expand-{}.json", args.mode);
    run.claim(&report_rel)?;
    let donors = if args.mode == Mode::Scratch {
        BTreeMap::new()
    } else {
        resolve_donors(&cfg, &base, &suite, &args.donor)?.0
    };
    let (expanded, metrics) = expand_all(&cfg, &base, &bank, &suite, args.mode, &donors)?;
    expanded.save(&out)?;
    for m in &metrics {
        write_log(run, &format!("expand-{}-{}", args.mode, m.lang), &m.train)?;
        let donor = m.donor.as_deref().unwrap_or("-");
        eprintln!("expand {} {} (donor {donor}): final loss {}, TER {:.4}", args.mode, m.lang, last_loss(&m.train), m.final_ter);
    }
    run.write_json(&report_rel, &json!({ "mode": args.mode, "donors": donors, "seed": cfg.seed, "metrics": metrics }))?;
    Ok(out_rel)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum LangSet {
    Base,
    New,
    All,
}

pub struct EvalArgs {
    pub model: String,
    pub bank: Option<String>,
    pub langs: LangSet,
    pub id: String,
    pub beam: Option<usize>,
}

fn test_sets(suite: &Suite, langs: LangSet) -> Vec<(LanguageId, &[lorawhisper::synth::Utterance])> {
    match langs {
        LangSet::Base => suite.test_sets(Role::Base),
        LangSet::New => suite.test_sets(Role::New),
        LangSet::All => {
            let mut v = suite.test_sets(Role::Base);
            v.extend(suite.test_sets(Role::New));
            v
        }
    }
}

pub fn eval_cmd(run: &RunDir, args: &EvalArgs) -> Result<EvalReport> {
    let mut cfg = run.config()?;
    if let Some(b) = args.beam {
        cfg.decode.beam_size = b;
    }
    let suite = run.suite(&cfg)?;
    let base = run.base(&args.model, &cfg)?;
    let bank = args.bank.as_deref().map(|b| run.bank(b, &base)).transpose()?;
    let rel = format!("reports/{}.json", args.id);
    run.claim(&rel)?;
    let (routing, mode) = match &bank {
        Some(b) => (Routing::Bank(b), "lora"),
        None => (Routing::Base, "full"),
    };
    let meta = EvalMeta { experiment_id: args.id.clone(), finetune_mode: mode.into(), seed: cfg.seed };
    let report = evaluate(&base, routing, &test_sets(&suite, args.langs), &cfg.decode, &meta)?;
    run.write(&rel, report.to_json())?;
    let per: Vec<String> = report.per_lang_ter().iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
    println!("{}: avg TER {:.4} ({})", args.id, report.avg, per.join(" "));
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Baseline {
    /// Joint full fine-tune on all base languages.
    Joint,
    /// One full fine-tune per base language.
    PerLanguage,
    /// Full fine-tune of the joint model on added-language data only.
    NewOnly,
    /// As `new-only`, rehearsing base-language data.
    FullPlus,
}

impl Baseline {
    fn name(self) -> &'static str {
        match self {
            Baseline::Joint => "joint",
            Baseline::PerLanguage => "per-language",
            Baseline::NewOnly => "new-only",
            Baseline::FullPlus => "full-plus",
        }
    }

    fn id(self) -> &'static str {
        match self {
            Baseline::Joint => "E2",
            Baseline::PerLanguage => "E3",
            Baseline::NewOnly => "E5",
            Baseline::FullPlus => "E6",
        }
    }
}

fn write_report(run: &RunDir, rel: &str, report: &EvalReport) -> Result<()> {
    run.write(rel, report.to_json())?;
    println!("{}: avg TER {:.4}", report.experiment_id, report.avg);
    Ok(())
}

pub fn baseline_cmd(run: &RunDir, kind: Baseline) -> Result<()> {
    let cfg = run.config()?;
    let suite = run.suite(&cfg)?;
    let base = run.base("base.lwbk", &cfg)?;
    let name = kind.name();
    let meta = |suffix: &str| EvalMeta { experiment_id: format!("{}{suffix}", kind.id()), finetune_mode: "full".into(), seed: cfg.seed };
    match kind {
        Baseline::Joint => {
            let out = run.claim("base-joint.lwbk")?;
            run.claim("reports/baseline-joint.json")?;
            let (model, log) = joint_finetune(&cfg, &base, &suite)?;
            save_base(&model, &out)?;
            write_log(run, "baseline-joint", &log)?;
            let r = evaluate(&model, Routing::Base, &suite.test_sets(Role::Base), &cfg.decode, &meta(""))?;
            write_report(run, "reports/baseline-joint.json", &r)?;
        }
        Baseline::PerLanguage => {
            run.claim("reports/baseline-per-language.json")?;
            let models = per_language_finetune(&cfg, &base, &suite)?;
            let mut merged: Option<EvalReport> = None;
            for (lang, model) in &models {
                save_base(model, run.claim(&format!("base-mono-{}.lwbk", lang.code))?)?;
                let test = &suite.get(&lang.code)?.test;
                let r = evaluate(model, Routing::Base, &[(lang.clone(), test.as_slice())], &cfg.decode, &meta(""))?;
                match &mut merged {
                    None => merged = Some(EvalReport { model: "per-language".into(), ..r }),
                    Some(m) => m.per_lang.extend(r.per_lang),
                }
            }
            let mut r = merged.expect("at least one base language");
            r.avg = r.recompute_avg();
            write_report(run, "reports/baseline-per-language.json", &r)?;
        }
        Baseline::NewOnly | Baseline::FullPlus => {
            let start = run.base("base-joint.lwbk", &cfg).context("run `baseline --kind joint` first")?;
            let out = run.claim(&format!("base-{name}.lwbk"))?;
            let (model, log) = new_language_finetune(&cfg, &start, &suite, kind == Baseline::FullPlus)?;
            save_base(&model, &out)?;
            write_log(run, &format!("baseline-{name}"), &log)?;
            for (set, role) in [("base", Role::Base), ("new", Role::New)] {
                let r = evaluate(&model, Routing::Base, &suite.test_sets(role), &cfg.decode, &meta(&format!("_{set}")))?;
                write_report(run, &format!("reports/baseline-{name}-{set}.json"), &r)?;
            }
        }
    }
    Ok(())
}

pub fn parse_dims(s: &str) -> Result<ModelDims> {
    match s {
        "whisper-small" => Ok(ModelDims::whisper_small()),
        "desk" => Ok(ExperimentConfig::desk().model.dims()),
        "default" => Ok(ExperimentConfig::default().model.dims()),
        custom => {
            let parts: Vec<usize> = custom
                .split(',')
                .map(|p| p.trim().parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| CliError::Invalid(format!("bad --dims {custom:?}")))?;
            match parts[..] {
                [d_model, ffn_dim, n_enc_layers, n_dec_layers] => Ok(ModelDims { d_model, ffn_dim, n_enc_layers, n_dec_layers }),
                _ => Err(CliError::Invalid("--dims takes whisper-small, desk, default or d_model,ffn,enc,dec".into()).into()),
            }
        }
    }
}

pub fn params_cmd(dims: &str, rank: usize, policy: &str) -> Result<usize> {
    let dims = parse_dims(dims)?;
    if rank == 0 || rank >= dims.d_model {
        return Err(CliError::Invalid(format!("rank {rank} must lie in 1..{}", dims.d_model)).into());
    }
    Ok(count_lora_params(&dims, rank, &AttachmentPolicy::by_name(policy)?))
}

fn read_report(run: &RunDir, rel: &str) -> Result<EvalReport> {
    Ok(serde_json::from_str(&fs::read_to_string(run.path(rel))?)?)
}

/// gen-data, base, bank, joint and new-only baselines, similarity, all three
/// expansion modes, evaluation, and a comparison table.
pub fn pipeline(cfg: &ExperimentConfig, run: &RunDir) -> Result<()> {
    gen_data(cfg, run, false)?;
    train_base_cmd(run)?;
    train_bank_cmd(run, None)?;
    baseline_cmd(run, Baseline::Joint)?;
    baseline_cmd(run, Baseline::NewOnly)?;
    similarity_cmd(run, &[])?;
    let eval = |bank: &str, langs, id: &str| {
        eval_cmd(run, &EvalArgs { model: "base.lwbk".into(), bank: Some(bank.into()), langs, id: id.into(), beam: None })
    };
    eval("bank.lwbk", LangSet::Base, "E4_base")?;
    for (id, mode) in [("E7", Mode::Scratch), ("E8", Mode::WarmStart), ("E9", Mode::Moe)] {
        let args = ExpandArgs { mode, donor: DonorChoice::Auto, rank: None, bank_in: "bank.lwbk".into(), bank_out: None };
        let bank = expand_cmd(run, &args)?;
        eval(&bank, LangSet::Base, &format!("{id}_base"))?;
        eval(&bank, LangSet::New, &format!("{id}_new"))?;
    }

    let rows = [
        ("E2", "joint full fine-tune", Some("baseline-joint"), None),
        ("E4", "lora bank", Some("E4_base"), None),
        ("E5", "full fine-tune, new only", Some("baseline-new-only-base"), Some("baseline-new-only-new")),
        ("E7", "lora scratch", Some("E7_base"), Some("E7_new")),
        ("E8", "lora warm start", Some("E8_base"), Some("E8_new")),
        ("E9", "lora moe", Some("E9_base"), Some("E9_new")),
    ];
    let load = |r: Option<&str>| r.map(|r| read_report(run, &format!("reports/{r}.json"))).transpose();
    let mut table = Vec::new();
    for (id, label, b, n) in rows {
        table.push((id, label, load(b)?, load(n)?));
    }
    let text = render_table(&table);
    print!("{text}");
    run.write("reports/summary.txt", &text)?;
    let summary: BTreeMap<&str, serde_json::Value> = table
        .iter()
        .map(|(id, label, b, n)| {
            let side = |r: &Option<EvalReport>| r.as_ref().map(|r| json!({ "per_lang": r.per_lang_ter(), "avg": r.avg }));
            (*id, json!({ "label": label, "base": side(b), "new": side(n) }))
        })
        .collect();
    run.write_json("reports/summary.json", &summary)?;
    Ok(())
}

type Row<'a> = (&'a str, &'a str, Option<EvalReport>, Option<EvalReport>);

fn render_table(rows: &[Row<'_>]) -> String {
    let langs = |reports: Vec<&Option<EvalReport>>| -> Vec<String> {
        reports.into_iter().flatten().next().map(|r| r.per_lang.keys().cloned().collect()).unwrap_or_default()
    };
    let base_langs = langs(rows.iter().map(|r| &r.2).collect());
    let new_langs = langs(rows.iter().map(|r| &r.3).collect());
    let mut out = format!("{:<4} {:<26}", "id", "system");
    for l in base_langs.iter().chain(std::iter::once(&"avg".to_string())) {
        out += &format!(" {l:>7}");
    }
    out += " |";
    for l in new_langs.iter().chain(std::iter::once(&"avg".to_string())) {
        out += &format!(" {l:>7}");
    }
    out += "\n";
    let cells = |r: &Option<EvalReport>, langs: &[String]| -> String {
        match r {
            None => langs.iter().map(|_| format!(" {:>7}", "-")).collect::<String>() + &format!(" {:>7}", "-"),
            Some(r) => {
                let mut s: String = langs.iter().map(|l| format!(" {:>7.4}", r.per_lang[l].ter)).collect();
                s += &format!(" {:>7.4}", r.avg);
                s
            }
        }
    };
    for (id, label, b, n) in rows {
        out += &format!("{id:<4} {label:<26}{} |{}\n", cells(b, &base_langs), cells(n, &new_langs));
    }
    out
}
