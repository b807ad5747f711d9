//! Command-line surface of the `trajmark` binary.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::attacks::{
    degrade, key_extraction_attack, metadata_tamper, pattern_spoof, pca_space_attack, tamper_patch, AttackSpec,
    AttackTarget, KeyExtractionParams, PatchContent, PcaAttackParams, PcaDirection, Rect,
};
use crate::error::{Error, Result};
use crate::io::config::RunConfig;
use crate::io::model_file::{read_calibration, write_calibration};
use crate::io::pgm::{read_mask, read_preview, write_mask, write_preview};
use crate::io::report::{write_verdicts, VerdictRow};
use crate::io::sidecar::{read_sidecar, write_sidecar, ImageSidecar};
use crate::io::tensor_file::{read_tensor, write_tensor};
use crate::keying::{KeyStore, UserKey};
use crate::localize::{refine_mask, score_mask, tamper_field, RefineParams};
use crate::pipeline::{calibrate, Calibration, Pipeline};
use crate::sampler::generate_watermarked;
use crate::tensor::{mean_of, LatentTensor};
use crate::theory::{run_theory_suite, TheorySuiteConfig};
use crate::verify::{Classification, VerdictReport};

/// Exit status for a completed verification that did not establish ownership.
pub const EXIT_REJECT: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "trajmark", version, about = "Trajectory watermarking: generate, verify, localize, attack")]
pub struct Cli {
    /// Run configuration (TOML). Built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for batch work (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create a key for a new user.
    Register {
        #[arg(long)]
        user: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        store: Option<PathBuf>,
    },
    /// Generate watermarked images with sidecars.
    Generate {
        #[arg(long)]
        user: String,
        /// Defaults to the wall clock; successive images use +1 s.
        #[arg(long)]
        timestamp: Option<u64>,
        #[arg(long, default_value_t = 1)]
        count: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write 8-bit PGM previews.
        #[arg(long)]
        preview: bool,
        #[arg(long)]
        store: Option<PathBuf>,
    },
    /// Fit thresholds, PCA models and the intrinsic-bias baseline.
    Calibrate {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Verify an image against a user's key and print the verdict as JSON.
    Verify(VerifyArgs),
    /// Localize tampered regions and write a PGM mask.
    Localize {
        #[command(flatten)]
        target: VerifyArgs,
        #[arg(long)]
        mask_out: PathBuf,
        /// Also write the raw tamper field as a tensor file.
        #[arg(long)]
        field_out: Option<PathBuf>,
        /// Ground-truth mask to score against.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long, default_value_t = RefineParams::default().c)]
        c: f64,
        #[arg(long, default_value_t = RefineParams::default().min_area)]
        min_area: usize,
    },
    /// Run an attack manifest over a set of images.
    Attack {
        /// JSON list of attack specs.
        #[arg(long)]
        manifest: PathBuf,
        /// Image tensor files; each needs a `.json` sidecar beside it.
        #[arg(long, num_args = 1.., required = true)]
        images: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        calibration: Option<PathBuf>,
        #[arg(long)]
        store: Option<PathBuf>,
    },
    /// Run the closed-form and Monte-Carlo checks and print a JSON report.
    Theory {
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub image: PathBuf,
    /// Defaults to the image path with a `.json` extension.
    #[arg(long)]
    pub sidecar: Option<PathBuf>,
    /// Claimed owner; defaults to the sidecar's user.
    #[arg(long)]
    pub user: Option<String>,
    #[arg(long)]
    pub calibration: Option<PathBuf>,
    #[arg(long)]
    pub store: Option<PathBuf>,
    /// Read an 8-bit PGM preview instead of the exact tensor.
    #[arg(long)]
    pub from_preview: bool,
}

struct Context {
    cfg: RunConfig,
    pipeline: Pipeline,
}

impl Context {
    fn load(path: Option<&Path>) -> Result<Self> {
        let cfg = match path {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let pipeline = cfg.build_pipeline()?;
        Ok(Self { cfg, pipeline })
    }

    fn store(&self, over: &Option<PathBuf>) -> PathBuf {
        over.clone().unwrap_or_else(|| self.cfg.key_store_path())
    }

    fn open_existing_store(&self, over: &Option<PathBuf>) -> Result<KeyStore> {
        let p = self.store(over);
        if !p.exists() {
            return Err(Error::io(&p, std::io::ErrorKind::NotFound.into()));
        }
        KeyStore::open(p)
    }

    fn calibration(&self, over: &Option<PathBuf>) -> Result<Calibration> {
        let cal = read_calibration(&over.clone().unwrap_or_else(|| self.cfg.calibration_path()))?;
        cal.check_pipeline(&self.pipeline)?;
        Ok(cal)
    }
}

fn now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// A closed stdout (e.g. piped into `head`) is not an error.
fn print_line(text: &str) -> Result<()> {
    use std::io::Write;
    match writeln!(std::io::stdout(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::io("<stdout>", e)),
        _ => Ok(()),
    }
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    print_line(&serde_json::to_string_pretty(v)?)
}

fn sidecar_path(image: &Path) -> PathBuf {
    image.with_extension("json")
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Image, sidecar (hash-checked) and claimed user for verify/localize.
fn load_target(ctx: &Context, a: &VerifyArgs) -> Result<(LatentTensor, ImageSidecar, String)> {
    let sc = read_sidecar(&a.sidecar.clone().unwrap_or_else(|| sidecar_path(&a.image)))?;
    sc.check_hashes(&ctx.pipeline.schedule_hash(), &ctx.pipeline.predictor_hash())?;
    if sc.deflection != ctx.pipeline.deflection {
        return Err(Error::Provenance("sidecar deflection differs from the loaded config".into()));
    }
    let image = if a.from_preview {
        let img = read_preview(&a.image, ctx.pipeline.shape[0])?;
        img.check_shape(ctx.pipeline.shape)?;
        img
    } else {
        read_tensor(&a.image)?
    };
    let user = a.user.clone().unwrap_or_else(|| sc.user_id.clone());
    Ok((image, sc, user))
}

/// Returns the process exit code.
pub fn run(cli: Cli) -> Result<i32> {
    if cli.jobs > 0 {
        // Fails only if a pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build_global();
    }
    let ctx = Context::load(cli.config.as_deref())?;
    match cli.command {
        Command::Register { user, seed, store } => {
            let path = ctx.store(&store);
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                create_dir(dir)?;
            }
            let mut ks = KeyStore::open(&path)?;
            let seed = seed.unwrap_or_else(rand::random);
            ks.register_user(&user, seed, ctx.pipeline.shape, now())?;
            log::info!("registered {user} in {}", path.display());
            Ok(0)
        }
        Command::Generate {
            user,
            timestamp,
            count,
            out,
            preview,
            store,
        } => {
            let ks = ctx.open_existing_store(&store)?;
            let key = ks.get(&user)?;
            create_dir(&out)?;
            let base = timestamp.unwrap_or_else(now);
            let p = &ctx.pipeline;
            for i in 0..count {
                let ts = base + i;
                let (img, meta) = generate_watermarked(key, ts, &p.deflection, &*p.predictor, &p.schedule)?;
                let stem = out.join(format!("{user}-{ts}"));
                write_tensor(&stem.with_extension("pait"), &img)?;
                write_sidecar(
                    &stem.with_extension("json"),
                    &ImageSidecar::new(&meta, p.schedule_hash(), p.predictor_hash()),
                )?;
                if preview {
                    write_preview(&stem.with_extension("pgm"), &img)?;
                }
                print_line(&stem.with_extension("pait").display().to_string())?;
            }
            Ok(0)
        }
        Command::Calibrate { out } => {
            let cal = calibrate(&ctx.pipeline, &ctx.cfg.calibration)?;
            let path = out.unwrap_or_else(|| ctx.cfg.calibration_path());
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                create_dir(dir)?;
            }
            write_calibration(&path, &cal)?;
            print_json(&serde_json::json!({
                "calibration": path,
                "config_hash": ctx.cfg.hash()?,
                "schedule_hash": cal.schedule_hash,
                "predictor_hash": cal.predictor_hash,
                "vanilla": cal.vanilla,
                "detection_explained_variance": cal.detection.explained_variance_ratio,
                "ownership_explained_variance": cal.ownership.explained_variance_ratio,
                "manifest": cal.manifest,
            }))?;
            Ok(0)
        }
        Command::Verify(a) => {
            let cal = ctx.calibration(&a.calibration)?;
            let (image, sc, user) = load_target(&ctx, &a)?;
            let ks = ctx.open_existing_store(&a.store)?;
            let v = cal.verify(&ctx.pipeline, &image, ks.get(&user)?, sc.timestamp)?;
            print_json(&v)?;
            Ok(if v.owned { 0 } else { EXIT_REJECT })
        }
        Command::Localize {
            target,
            mask_out,
            field_out,
            truth,
            c,
            min_area,
        } => {
            let cal = ctx.calibration(&target.calibration)?;
            let (image, sc, user) = load_target(&ctx, &target)?;
            let ks = ctx.open_existing_store(&target.store)?;
            let p = &ctx.pipeline;
            let field = tamper_field(&image, ks.get(&user)?, sc.timestamp, &p.deflection, &*p.predictor, &p.schedule, &cal.baseline)?;
            let params = RefineParams {
                c,
                min_area,
                ..Default::default()
            };
            let mask = refine_mask(&field, &cal.baseline, &params);
            write_mask(&mask_out, &mask)?;
            if let Some(f) = field_out {
                write_tensor(&f, &field)?;
            }
            let scores = match truth {
                Some(t) => Some(score_mask(&mask, &read_mask(&t)?, &field)?),
                None => None,
            };
            print_json(&serde_json::json!({
                "mask": mask_out,
                "flagged_ratio": mask.ratio(),
                "params": params,
                "scores": scores,
            }))?;
            Ok(0)
        }
        Command::Attack {
            manifest,
            images,
            out,
            calibration,
            store,
        } => {
            let cal = ctx.calibration(&calibration)?;
            let ks = ctx.open_existing_store(&store)?;
            let specs: Vec<AttackSpec> = serde_json::from_slice(
                &std::fs::read(&manifest).map_err(|e| Error::io(&manifest, e))?,
            )?;
            for s in &specs {
                s.validate()?;
            }
            let mut inputs = Vec::new();
            for path in &images {
                let sc = read_sidecar(&sidecar_path(path))?;
                sc.check_hashes(&ctx.pipeline.schedule_hash(), &ctx.pipeline.predictor_hash())?;
                let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                inputs.push((id, read_tensor(path)?, sc));
            }
            create_dir(&out)?;
            let bench = Bench {
                p: &ctx.pipeline,
                cal: &cal,
                ks: &ks,
                out: &out,
            };
            let rows = bench.run(&specs, &inputs)?;
            write_verdicts(&out.join("verdicts.csv"), &rows)?;
            let summary = summarize(&rows);
            print_json(&summary)?;
            Ok(0)
        }
        Command::Theory { trials, out } => {
            let mut cfg = TheorySuiteConfig::default();
            if let Some(t) = trials {
                cfg.mc_trials = t;
            }
            let report = run_theory_suite(&cfg)?;
            match out {
                Some(p) => std::fs::write(&p, serde_json::to_vec_pretty(&report)?).map_err(|e| Error::io(&p, e))?,
                None => print_json(&report)?,
            }
            if !report.passed {
                return Err(Error::Theory("one or more theory checks failed".into()));
            }
            Ok(0)
        }
    }
}

struct Bench<'a> {
    p: &'a Pipeline,
    cal: &'a Calibration,
    ks: &'a KeyStore,
    out: &'a Path,
}

impl Bench<'_> {
    fn verify(&self, img: &LatentTensor, user: &str, ts: u64) -> Result<VerdictReport> {
        self.cal.verify(self.p, img, self.ks.get(user)?, ts)
    }

    fn save(&self, name: &str, img: &LatentTensor) -> Result<()> {
        write_tensor(&self.out.join(format!("{name}.pait")), img)
    }

    fn run(&self, specs: &[AttackSpec], inputs: &[(String, LatentTensor, ImageSidecar)]) -> Result<Vec<VerdictRow>> {
        use rayon::prelude::*;
        let mut rows = Vec::new();
        for (si, spec) in specs.iter().enumerate() {
            let kind = spec.kind_name();
            log::info!("attack {si}: {kind}");
            let tag = |id: &str| format!("{id}.{si}-{kind}");
            match spec {
                AttackSpec::PatternSpoof { strength } => {
                    let wm: Vec<LatentTensor> = inputs.iter().map(|i| i.1.clone()).collect();
                    let plain: Vec<LatentTensor> =
                        (0..wm.len() as u64).map(|j| self.p.generate_plain(0xA000 + j)).collect::<Result<_>>()?;
                    let targets: Vec<LatentTensor> =
                        (0..wm.len() as u64).map(|j| self.p.generate_plain(0xB000 + j)).collect::<Result<_>>()?;
                    let spoofed = pattern_spoof(&wm, &plain, &targets, *strength)?;
                    for ((id, _, sc), img) in inputs.iter().zip(&spoofed) {
                        self.save(&tag(id), img)?;
                        let v = self.verify(img, &sc.user_id, sc.timestamp)?;
                        rows.push(VerdictRow::new(tag(id), kind, None, &v));
                    }
                }
                AttackSpec::KeyExtraction {
                    iters,
                    step_size,
                    reg_weight,
                    seed,
                } => {
                    let mut by_user: BTreeMap<&str, Vec<&(String, LatentTensor, ImageSidecar)>> = BTreeMap::new();
                    for i in inputs {
                        by_user.entry(&i.2.user_id).or_default().push(i);
                    }
                    for (user, group) in by_user {
                        let targets: Vec<AttackTarget> = group
                            .iter()
                            .map(|(_, img, sc)| AttackTarget {
                                image: img.clone(),
                                timestamp: sc.timestamp,
                            })
                            .collect();
                        let params = KeyExtractionParams {
                            iters: *iters,
                            step_size: *step_size,
                            reg_weight: *reg_weight,
                            seed: *seed,
                            ..Default::default()
                        };
                        let r = key_extraction_attack(&targets, None, &self.p.deflection, &*self.p.predictor, &self.p.schedule, &params)?;
                        log::info!("key extraction vs {user}: trace {:?}", r.trace);
                        for (id, img, sc) in group {
                            let v = self.cal.verify(self.p, img, &r.candidate, sc.timestamp)?;
                            rows.push(VerdictRow::new(tag(id), kind, None, &v));
                        }
                    }
                }
                _ => {
                    let results = inputs
                        .par_iter()
                        .enumerate()
                        .map(|(j, (id, img, sc))| self.single(spec, j as u64, img, sc).map(|r| (tag(id), r)))
                        .collect::<Result<Vec<_>>>()?;
                    for (name, (img, v)) in results {
                        self.save(&name, &img)?;
                        rows.push(VerdictRow::new(name, kind, spec.level(), &v));
                    }
                }
            }
        }
        Ok(rows)
    }

    /// Attacks that act on one image at a time.
    fn single(&self, spec: &AttackSpec, j: u64, img: &LatentTensor, sc: &ImageSidecar) -> Result<(LatentTensor, VerdictReport)> {
        let user = sc.user_id.as_str();
        match spec {
            AttackSpec::JpegLike { .. }
            | AttackSpec::GaussianNoise { .. }
            | AttackSpec::GaussianBlur { .. }
            | AttackSpec::Brightness { .. } => {
                let (k, level) = spec.degradation().expect("degradation");
                let seed = match spec {
                    AttackSpec::GaussianNoise { seed, .. } => seed.wrapping_add(j),
                    _ => 0,
                };
                let d = degrade(img, k, level, seed)?;
                let v = self.verify(&d, user, sc.timestamp)?;
                Ok((d, v))
            }
            AttackSpec::TamperPatch { ratio, seed } => {
                let [_, h, w] = img.shape();
                let side = Rect::square_with_ratio(*ratio, h, w, 0, 0).height.min(h).min(w);
                let rect = Rect {
                    y: (h - side) / 2,
                    x: (w - side) / 2,
                    height: side,
                    width: side,
                };
                let (t, _) = tamper_patch(
                    img,
                    rect,
                    &PatchContent::Noise {
                        sigma: 0.2,
                        seed: seed.wrapping_add(j),
                    },
                )?;
                let v = self.verify(&t, user, sc.timestamp)?;
                Ok((t, v))
            }
            AttackSpec::MetadataTamper { seed } => {
                let meta = metadata_tamper(&sc.meta(), seed.wrapping_add(j));
                let v = self.verify(img, user, meta.timestamp)?;
                Ok((img.clone(), v))
            }
            AttackSpec::PcaSpace {
                direction,
                eps_inf,
                lambda_percep,
                iters,
            } => {
                let attacker = UserKey::from_seed("attacker", img.shape(), 0xA77A_C4E5 ^ j, 0);
                let params = PcaAttackParams {
                    eps_inf: *eps_inf,
                    lambda_percep: *lambda_percep,
                    iters: *iters,
                    ..Default::default()
                };
                let (source, centroid) = match direction {
                    PcaDirection::ToNonwm => {
                        let biases = (0..20u64)
                            .map(|i| Ok(self.p.bias(&self.p.generate_plain(0xC000 + i)?, &attacker, sc.timestamp)?.delta))
                            .collect::<Result<Vec<_>>>()?;
                        (img.clone(), mean_of(&biases)?)
                    }
                    PcaDirection::ToBenign => (
                        self.p.generate_plain(0xD000 + j)?,
                        self.cal.detection.back_project(&self.cal.detection.proj_mean),
                    ),
                };
                let target = AttackTarget {
                    image: source,
                    timestamp: sc.timestamp,
                };
                let adv = pca_space_attack(&target, &centroid, &attacker, &self.p.deflection, &*self.p.predictor, &self.p.schedule, &params)?;
                let v = self.verify(&adv, user, sc.timestamp)?;
                Ok((adv, v))
            }
            AttackSpec::PatternSpoof { .. } | AttackSpec::KeyExtraction { .. } => {
                unreachable!("batch attacks are handled in Bench::run")
            }
        }
    }
}

#[derive(Debug, Serialize)]
struct SummaryLine {
    attack_kind: String,
    level: Option<u8>,
    n: usize,
    owned: f64,
    attack_flagged: f64,
    benign: usize,
    removal_attacked_owned: usize,
    spoofed_rejected: usize,
    invalid_or_nonwatermarked: usize,
}

fn summarize(rows: &[VerdictRow]) -> Vec<SummaryLine> {
    let mut groups: BTreeMap<(String, Option<u8>), Vec<&VerdictRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.attack_kind.clone(), r.level)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((attack_kind, level), g)| {
            let n = g.len();
            let count = |c: Classification| g.iter().filter(|r| r.classification == c).count();
            SummaryLine {
                attack_kind,
                level,
                n,
                owned: g.iter().filter(|r| r.owned).count() as f64 / n as f64,
                attack_flagged: g.iter().filter(|r| r.classification != Classification::Benign).count() as f64 / n as f64,
                benign: count(Classification::Benign),
                removal_attacked_owned: count(Classification::RemovalAttackedOwned),
                spoofed_rejected: count(Classification::SpoofedRejected),
                invalid_or_nonwatermarked: count(Classification::InvalidOrNonwatermarked),
            }
        })
        .collect()
}
