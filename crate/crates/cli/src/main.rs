use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use macop::analysis::{
    build_eval_set, continual_metrics, crossplay_of_groups, evaluate_overall, wilcoxon_rank_sum, AlphaMatrix,
};
use macop::archive::{read_archive, read_run_info};
use macop::config::{Algo, MacopConfig};
use macop::ego::{EgoPolicy, EgoVariant};
use macop::orchestrator::{
    alpha_tilde, build_arena, recipe, replay_sequence, resume_dir, train_to_dir, Summary, ALPHA_FILE, CONFIG_FILE,
    EGO_FILE,
};
use macop::theory::{verify_theory, TheoryConfig};
use macop::{Error, Result};

#[derive(Parser)]
#[command(name = "macop", about = "Incompatible-teammate generation and continual coordination training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one method and write its run directory.
    Train {
        #[arg(long, default_value = "macop")]
        algo: String,
        /// Scenario preset; overrides the config file.
        #[arg(long)]
        env: Option<String>,
        /// TOML configuration; desk-profile defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config file.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Continue an interrupted run.
    Resume {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Score a trained ego against the union of several runs' archives.
    Evaluate {
        /// Run directory holding the ego.
        #[arg(long)]
        ego: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        evalset: Vec<PathBuf>,
        #[arg(long, default_value_t = 32)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    #[command(subcommand)]
    Analyze(Analyze),
}

#[derive(Subcommand)]
enum Analyze {
    /// Backward transfer of a run, or of a fresh ego replaying its sequence.
    Bwt {
        #[arg(long)]
        run: PathBuf,
        /// multi_head, finetune, single_head, ewc or clear.
        #[arg(long)]
        replay: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Forward transfer; trains the single-group references when missing.
    Fwt {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Teammate-by-partner return matrix over archived groups.
    Crossplay {
        #[arg(long, num_args = 1.., required = true)]
        run: Vec<PathBuf>,
        #[arg(long, default_value_t = 32)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Exact checks of the similarity bounds on a tabular game.
    Theory {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        pairs: usize,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Two-sided Wilcoxon rank-sum test of two samples.
    RankSum {
        #[arg(long, num_args = 3.., required = true, allow_negative_numbers = true)]
        a: Vec<f64>,
        #[arg(long, num_args = 3.., required = true, allow_negative_numbers = true)]
        b: Vec<f64>,
    },
}

fn load_config(dir: &Path) -> Result<MacopConfig> {
    MacopConfig::from_toml_str(&fs::read_to_string(dir.join(CONFIG_FILE))?)
}

fn load_ego(dir: &Path) -> Result<EgoPolicy> {
    EgoPolicy::from_json(&fs::read_to_string(dir.join(EGO_FILE))?)
}

fn load_alpha(dir: &Path) -> Result<AlphaMatrix> {
    let path = dir.join(ALPHA_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            algo,
            env,
            config,
            seed,
            out,
        } => {
            let algo: Algo = algo.parse()?;
            let mut cfg = match config {
                Some(p) => MacopConfig::from_toml_str(&fs::read_to_string(p)?)?,
                None => MacopConfig::desk(),
            };
            if let Some(e) = env {
                cfg.env = e;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            let art = train_to_dir(algo, &cfg, &out)?;
            println!("{}", serde_json::to_string_pretty(&Summary::of(&art))?);
        }
        Command::Resume { dir } => {
            let art = resume_dir(&dir)?;
            println!("{}", serde_json::to_string_pretty(&Summary::of(&art))?);
        }
        Command::Evaluate {
            ego,
            evalset,
            episodes,
            seed,
            out,
        } => {
            let cfg = load_config(&ego)?;
            let algo: Algo = read_run_info(&ego)?.algo.parse()?;
            let policy = load_ego(&ego)?;
            let arena = build_arena(&cfg)?;
            let set = build_eval_set(&evalset)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let report = evaluate_overall(&policy, &set, episodes, recipe(algo, &cfg).head_choice, &arena, &mut rng)?;
            let mut text = String::from("entry,head,mean,std\n");
            for r in &report.rows {
                text.push_str(&format!("{},{},{},{}\n", r.label, r.head, r.mean, r.std));
            }
            text.push_str(&format!("grand_mean,,{},\n", report.grand_mean));
            fs::write(&out, text)?;
            println!("grand mean {:.6} over {} entries", report.grand_mean, report.rows.len());
        }
        Command::Analyze(a) => analyze(a)?,
    }
    Ok(())
}

fn analyze(a: Analyze) -> Result<()> {
    match a {
        Analyze::Bwt { run, replay, seed } => {
            let alpha = match replay {
                None => load_alpha(&run)?,
                Some(v) => {
                    let variant: EgoVariant = serde_json::from_value(serde_json::Value::String(v))?;
                    let cfg = load_config(&run)?;
                    let algo: Algo = read_run_info(&run)?.algo.parse()?;
                    let (_, groups) = read_archive(&run)?;
                    let order = load_alpha(&run)?.group_ids;
                    let seq = order
                        .iter()
                        .map(|id| groups.iter().find(|g| g.id == *id).cloned())
                        .collect::<Option<Vec<_>>>()
                        .ok_or_else(|| Error::Checkpoint("sequence refers to a group missing from the archive".into()))?;
                    let arena = build_arena(&cfg)?;
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    replay_sequence(&seq, variant, &cfg, recipe(algo, &cfg).head_choice, &arena, &mut rng)?.1
                }
            };
            let (bwt, _) = continual_metrics(&alpha)?;
            println!("BWT {bwt:.6} over K={}", alpha.k());
        }
        Analyze::Fwt { run, seed } => {
            let mut alpha = load_alpha(&run)?;
            if alpha.alpha_tilde.is_none() {
                let cfg = load_config(&run)?;
                let algo: Algo = read_run_info(&run)?.algo.parse()?;
                let (_, groups) = read_archive(&run)?;
                let seq = alpha
                    .group_ids
                    .iter()
                    .map(|id| groups.iter().find(|g| g.id == *id).cloned())
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(|| Error::Checkpoint("sequence refers to a group missing from the archive".into()))?;
                let arena = build_arena(&cfg)?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                alpha.alpha_tilde = Some(alpha_tilde(&seq, &cfg, recipe(algo, &cfg).head_choice, &arena, &mut rng)?);
                fs::write(run.join(ALPHA_FILE), serde_json::to_string_pretty(&alpha)?)?;
            }
            let (bwt, fwt) = continual_metrics(&alpha)?;
            println!("BWT {bwt:.6} FWT {:.6} over K={}", fwt.expect("alpha_tilde present"), alpha.k());
        }
        Analyze::Crossplay {
            run,
            episodes,
            seed,
            out,
        } => {
            let set = build_eval_set(&run)?;
            let cfg = load_config(&run[0])?;
            let arena = build_arena(&cfg)?;
            let groups: Vec<(String, &_)> = set.entries.iter().map(|e| (e.label(), &e.group)).collect();
            let m = crossplay_of_groups(&groups, episodes, seed, &arena)?;
            fs::write(&out, m.to_csv()?)?;
            println!(
                "diagonal {:.6} off-diagonal {:.6} ratio {:.6}",
                m.diagonal_mean(),
                m.off_diagonal_mean(),
                m.off_diagonal_ratio()
            );
        }
        Analyze::Theory {
            seed,
            pairs,
            samples,
            out,
        } => {
            let cfg = TheoryConfig {
                similar_pairs: pairs,
                jsd_samples: samples,
                ..TheoryConfig::default()
            };
            let report = verify_theory(&cfg, &mut ChaCha8Rng::seed_from_u64(seed));
            let text = report.to_text();
            match out {
                Some(p) => fs::write(p, &text)?,
                None => print!("{text}"),
            }
        }
        Analyze::RankSum { a, b } => {
            let r = wilcoxon_rank_sum(&a, &b)?;
            println!(
                "z {:.6} rank_sum_a {} p {:.6} verdict {}",
                r.statistic,
                r.rank_sum_a,
                r.p_value,
                r.verdict.symbol()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
