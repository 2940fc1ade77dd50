use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sapa_core::complexity::{cost_table, render_csv, render_text, BaselineSettings};
use sapa_core::grad::{GradcheckCase, GradcheckOptions};
use sapa_core::io::{encode_tensor, read_tensor, write_tensor};
use sapa_core::params_io::load_params;
use sapa_core::synth::TwoCluster;
use sapa_core::{
    gradcheck, sapa_forward, KernelField, NormKind, SapaParams, SimilarityKind, Tensor,
    UpsamplerConfig,
};
use sha2::{Digest, Sha256};

/// Similarity-aware feature upsampling.
#[derive(Parser, Debug)]
#[command(name = "sapa", version)]
struct Cli {
    #[command(flatten)]
    opts: GlobalOpts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct GlobalOpts {
    /// Similarity function: inner, bilinear or gated.
    #[arg(long, global = true, default_value = "gated")]
    sim: SimilarityKind,
    /// Kernel normalizer: exp, relu, sigmoid, softplus or none.
    #[arg(long, global = true, default_value = "exp")]
    norm: NormKind,
    /// Odd window size K.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Embedding dimension d.
    #[arg(long, global = true)]
    d: Option<usize>,
    /// Upscale ratio.
    #[arg(long, global = true, default_value_t = 2)]
    ratio: usize,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Compute in 64-bit precision.
    #[arg(long = "f64", global = true)]
    double: bool,
    /// Use a separate projection for the gated self term.
    #[arg(long, global = true)]
    expanded_gate: bool,
}

impl GlobalOpts {
    fn config(&self, default_d: usize) -> UpsamplerConfig {
        UpsamplerConfig {
            similarity: self.sim,
            norm: self.norm,
            kernel_size: self.k.unwrap_or(5),
            embed_dim: self.d.unwrap_or(default_d),
            ratio: self.ratio,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Upsample a decoder map guided by an encoder map.
    Upsample(UpsampleArgs),
    /// Render one offset of a saved kernel field as a PGM image.
    KernelMap {
        #[arg(long)]
        kernels: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        u: Option<isize>,
        #[arg(long, allow_hyphen_values = true)]
        v: Option<isize>,
    },
    /// Write a two-cluster decoder/encoder pair.
    Synth {
        #[arg(long, default_value_t = 16)]
        height: usize,
        #[arg(long, default_value_t = 16)]
        width: usize,
        #[arg(long, default_value_t = 64)]
        channels: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        /// Decoder size as HxWxC.
        #[arg(long, default_value = "6x6x4")]
        size: String,
        #[arg(long, default_value_t = 1e-6)]
        step: f64,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
    },
    /// Per-pixel multiply-adds and parameters of several upsamplers.
    Flops {
        channels: u64,
        embed_dim: u64,
        kernel: u64,
        #[arg(long)]
        csv: bool,
    },
    /// Time the forward pass across sizes and thread counts.
    Bench {
        /// Decoder sizes as HxWxC, comma separated.
        #[arg(long, default_value = "32x32x64,64x64x256")]
        sizes: String,
        /// Highest thread count; runs 1, 2, 4, ... up to it.
        #[arg(long = "max-threads", default_value_t = 4)]
        max_threads: usize,
        #[arg(long, default_value_t = 3)]
        reps: usize,
    },
}

#[derive(Args, Debug)]
struct UpsampleArgs {
    #[arg(long)]
    encoder: PathBuf,
    #[arg(long)]
    decoder: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Directory with p_x.sapt, p_y.sapt, gate.sapt and optionally
    /// p_self.sapt; missing files fall back to seeded values.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Also write the kernel field (K^2 channels).
    #[arg(long)]
    kernels_out: Option<PathBuf>,
    /// Also write a PGM kernel map.
    #[arg(long)]
    kernel_map: Option<PathBuf>,
    /// Window offset for --kernel-map as `u,v` (default: top-left).
    #[arg(long, allow_hyphen_values = true)]
    offset: Option<String>,
}

fn parse_size(s: &str) -> Result<(usize, usize, usize)> {
    let parts: Vec<usize> = s
        .split('x')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("invalid size {s:?}, expected HxWxC"))?;
    match parts[..] {
        [h, w, c] if h > 0 && w > 0 && c > 0 => Ok((h, w, c)),
        _ => bail!("invalid size {s:?}, expected HxWxC with positive dims"),
    }
}

fn parse_offset(s: &str) -> Result<(isize, isize)> {
    let (u, v) = s
        .split_once(',')
        .with_context(|| format!("invalid offset {s:?}, expected u,v"))?;
    Ok((u.trim().parse()?, v.trim().parse()?))
}

fn load_for(
    opts: &GlobalOpts,
    dir: Option<&Path>,
    dec: &Tensor,
    enc: &Tensor,
) -> Result<SapaParams<f32>> {
    let cfg = opts.config(32);
    let mut params = load_params(
        dir,
        dec.channels(),
        enc.channels(),
        cfg.embed_dim,
        opts.seed,
    )?;
    if opts.expanded_gate && params.p_self.is_none() {
        params = params.with_separate_self_projection(opts.seed);
    }
    Ok(params)
}

fn upsample(opts: &GlobalOpts, args: &UpsampleArgs) -> Result<()> {
    let enc = read_tensor(&args.encoder)
        .with_context(|| format!("reading {}", args.encoder.display()))?;
    let dec = read_tensor(&args.decoder)
        .with_context(|| format!("reading {}", args.decoder.display()))?;
    let cfg = opts.config(32);
    let params = load_for(opts, args.params.as_deref(), &dec, &enc)?;
    let offset = args.offset.as_deref().map(parse_offset).transpose()?;
    let start = Instant::now();
    let (output, kernels): (Tensor, KernelField) = if opts.double {
        let (o, k) = sapa_forward(
            &enc.cast::<f64>(),
            &dec.cast::<f64>(),
            &params.cast::<f64>(),
            &cfg,
        )?;
        let kt = k.to_tensor().cast::<f32>();
        (o.cast::<f32>(), KernelField::from_tensor(&kt)?)
    } else {
        sapa_forward(&enc, &dec, &params, &cfg)?
    };
    log::info!("forward took {:.3}s", start.elapsed().as_secs_f64());
    write_tensor(&output, &args.out)?;
    if let Some(p) = &args.kernels_out {
        write_tensor(&kernels.to_tensor(), p)?;
    }
    if let Some(p) = &args.kernel_map {
        let r = (cfg.kernel_size / 2) as isize;
        kernels
            .kernel_map(offset.unwrap_or((-r, -r)))?
            .write_pgm(p)?;
    }
    let (h, w, c) = output.dims();
    println!("wrote {} ({h}x{w}x{c})", args.out.display());
    Ok(())
}

fn kernel_map(kernels: &Path, out: &Path, u: Option<isize>, v: Option<isize>) -> Result<()> {
    let field = KernelField::from_tensor(&read_tensor(kernels)?)?;
    let r = (field.kernel_size() / 2) as isize;
    let offset = (u.unwrap_or(-r), v.unwrap_or(-r));
    field.kernel_map(offset)?.write_pgm(out)?;
    println!(
        "wrote {} for offset ({}, {})",
        out.display(),
        offset.0,
        offset.1
    );
    Ok(())
}

fn synth(opts: &GlobalOpts, h: usize, w: usize, c: usize, dir: &Path) -> Result<()> {
    if h == 0 || w == 0 || c == 0 || opts.ratio == 0 {
        bail!("synth dimensions and ratio must be positive");
    }
    let f = TwoCluster::generate(h, w, c, opts.ratio, opts.seed);
    std::fs::create_dir_all(dir)?;
    write_tensor(&f.decoder, dir.join("decoder.sapt"))?;
    write_tensor(&f.encoder, dir.join("encoder.sapt"))?;
    println!(
        "wrote decoder {h}x{w}x{c} and encoder {}x{}x{c} to {} (seam at decoder column {})",
        h * opts.ratio,
        w * opts.ratio,
        dir.display(),
        f.seam
    );
    Ok(())
}

fn run_gradcheck(opts: &GlobalOpts, size: &str, step: f64, tolerance: f64) -> Result<bool> {
    let (h, w, c) = parse_size(size)?;
    let cfg = opts.config(c);
    cfg.validate()?;
    let mut case = GradcheckCase::random(opts.seed, cfg, h, w, c);
    if opts.expanded_gate {
        case.params = case.params.clone().with_separate_self_projection(opts.seed);
    }
    let options = GradcheckOptions {
        step,
        tolerance,
        ..GradcheckOptions::default()
    };
    let report = gradcheck(&case, &options)?;
    println!("group       coords  max_rel_error  max_abs_error");
    for g in &report.groups {
        println!(
            "{:<10} {:>7}  {:>13.3e}  {:>13.3e}",
            g.group.name(),
            g.coordinates,
            g.max_rel_error,
            g.max_abs_error
        );
    }
    let passed = report.passed();
    println!(
        "{}: max relative error {:.3e} (tolerance {:.0e})",
        if passed { "PASS" } else { "FAIL" },
        report.max_rel_error(),
        tolerance
    );
    Ok(passed)
}

fn flops(c: u64, d: u64, k: u64, csv: bool) -> Result<()> {
    let reports = cost_table(c, d, k, BaselineSettings::default())?;
    if csv {
        print!("{}", render_csv(&reports));
    } else {
        print!("{}", render_text(&reports));
    }
    Ok(())
}

fn checksum(t: &Tensor) -> String {
    Sha256::digest(encode_tensor(t))
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn bench(opts: &GlobalOpts, sizes: &str, max_threads: usize, reps: usize) -> Result<bool> {
    if max_threads == 0 || reps == 0 {
        bail!("--max-threads and --reps must be positive");
    }
    let mut threads = vec![1];
    while threads.last().unwrap() * 2 <= max_threads {
        threads.push(threads.last().unwrap() * 2);
    }
    if *threads.last().unwrap() != max_threads {
        threads.push(max_threads);
    }
    let mut consistent = true;
    println!("size,threads,seconds,output_mpix_per_s,sha256");
    for size in sizes.split(',') {
        let (h, w, c) = parse_size(size.trim())?;
        let cfg = opts.config(32.min(c));
        let r = cfg.ratio;
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let dec = Tensor::from_fn(h, w, c, |_, _, _| rng.random_range(-1.0f32..1.0));
        let enc = Tensor::from_fn(h * r, w * r, c, |_, _, _| rng.random_range(-1.0f32..1.0));
        let params = load_for(opts, None, &dec, &enc)?;
        let mut first: Option<String> = None;
        for &t in &threads {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(t).build()?;
            let mut best = f64::INFINITY;
            let mut out = None;
            for _ in 0..reps {
                let start = Instant::now();
                let (o, _) = pool.install(|| sapa_forward(&enc, &dec, &params, &cfg))?;
                best = best.min(start.elapsed().as_secs_f64());
                out = Some(o);
            }
            let sum = checksum(&out.expect("reps > 0"));
            let mpix = (h * w * r * r) as f64 / best / 1e6;
            println!("{h}x{w}x{c},{t},{best:.6},{mpix:.3},{sum}");
            match &first {
                None => first = Some(sum),
                Some(f) if *f != sum => consistent = false,
                _ => {}
            }
        }
    }
    if !consistent {
        eprintln!("checksums differ across thread counts");
    }
    Ok(consistent)
}

fn run(cli: Cli) -> Result<bool> {
    if let Some(t) = cli.opts.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()?;
    }
    let opts = &cli.opts;
    match cli.command {
        Command::Upsample(args) => upsample(opts, &args).map(|_| true),
        Command::KernelMap { kernels, out, u, v } => kernel_map(&kernels, &out, u, v).map(|_| true),
        Command::Synth {
            height,
            width,
            channels,
            out_dir,
        } => synth(opts, height, width, channels, &out_dir).map(|_| true),
        Command::Gradcheck {
            size,
            step,
            tolerance,
        } => run_gradcheck(opts, &size, step, tolerance),
        Command::Flops {
            channels,
            embed_dim,
            kernel,
            csv,
        } => flops(channels, embed_dim, kernel, csv).map(|_| true),
        Command::Bench {
            sizes,
            max_threads,
            reps,
        } => bench(opts, &sizes, max_threads, reps),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
