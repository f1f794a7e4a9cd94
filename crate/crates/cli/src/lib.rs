//! Batch front end for `usvis-core`: every pipeline stage as a subcommand,
//! a JSON-configured end-to-end run, phantom generation and the HTTP server.

pub mod args;
pub mod config;
pub mod error;
pub mod pipeline;

use std::path::Path;

use usvis_core::phantom::{make_phantom, PhantomKind, PhantomSpec};
use usvis_service::{Processing, ServiceConfig};

pub use args::{Cli, Command};
pub use config::{PipelineConfig, RenderConfig};
pub use error::{AtStage, Stage, StageError};
pub use pipeline::{run_pipeline, Fidelity, PipelineReport};

use args::*;
use pipeline::*;

/// Exit status for argument errors.
pub const EXIT_USAGE: u8 = 1;
/// Exit status when a stage fails.
pub const EXIT_STAGE_FAILURE: u8 = 2;

fn base_config(path: Option<&Path>) -> Result<PipelineConfig, StageError> {
    path.map_or_else(|| Ok(PipelineConfig::default()), PipelineConfig::load)
}

fn report_fidelity(input: &Fidelity, filtered: &Fidelity) {
    println!("input     mse {:.6}  psnr {:.2} dB", input.mse, input.psnr);
    println!("filtered  mse {:.6}  psnr {:.2} dB", filtered.mse, filtered.psnr);
}

/// Merges `--config` and flags into a full pipeline config.
pub fn pipeline_config(a: &PipelineArgs) -> Result<PipelineConfig, StageError> {
    let mut c = base_config(a.config.as_deref())?;
    if let Some(i) = &a.input {
        c.input = i.clone();
    }
    if let Some(o) = &a.output {
        c.output = o.clone();
    }
    if let Some(r) = &a.reference {
        c.reference = Some(r.clone());
    }
    if let Some(s) = a.spacing {
        c.spacing = Some(s);
    }
    a.bilateral.apply(&mut c.bilateral);
    a.features.apply(&mut c.features);
    a.fusion.apply(&mut c.fusion)?;
    a.render.apply(&mut c.render);
    Ok(c)
}

pub fn run(cli: Cli) -> Result<(), StageError> {
    match cli.command {
        Command::Ingest(a) => {
            if !a.input.is_dir() {
                return Err(StageError::msg(
                    Stage::Input,
                    format!("{} is not a frame directory", a.input.display()),
                ));
            }
            let volume = load_volume(&a.input, a.spacing, Stage::Input)?;
            save_volume(&volume, &a.output, Stage::Input)?;
            println!("wrote {} {:?}", a.output.display(), volume.dims().to_array());
        }
        Command::Filter(a) => {
            let mut params = base_config(a.config.as_deref())?.bilateral;
            a.bilateral.apply(&mut params);
            params.validate().at(Stage::Config)?;
            let volume = load_volume(&a.input, None, Stage::Input)?;
            let reference = match &a.reference {
                Some(p) => Some(load_volume(p, None, Stage::Reference)?),
                None => None,
            };
            let filtered = filter(&volume, &params)?;
            save_volume(&filtered, &a.output, Stage::Filter)?;
            println!("wrote {}", a.output.display());
            if let Some(r) = reference {
                report_fidelity(&Fidelity::measure(&volume, &r)?, &Fidelity::measure(&filtered, &r)?);
            }
        }
        Command::Features(a) => {
            let mut config = base_config(a.config.as_deref())?.features;
            a.features.apply(&mut config);
            let volume = load_volume(&a.input, None, Stage::Input)?;
            let set = extract_features(&volume, &config)?;
            println!("wrote {}", save_features(&set, &a.output)?.display());
        }
        Command::Fuse(a) => {
            let mut params = base_config(a.config.as_deref())?.fusion;
            a.fusion.apply(&mut params)?;
            let volume = load_volume(&a.input, None, Stage::Input)?;
            let set = load_features(&a.manifest)?;
            let fused = fuse_features(&volume, &set, &params)?;
            println!("wrote {}", save_fused(&fused, &a.output)?.display());
        }
        Command::Render(a) => {
            let mut config = base_config(a.config.as_deref())?.render;
            a.render.apply(&mut config);
            config.camera().validate().at(Stage::Config)?;
            config.options.validate().at(Stage::Config)?;
            let image = render_path(&a.input, &config)?;
            save_png(&image, &a.output)?;
            println!("wrote {}", a.output.display());
        }
        Command::Pipeline(a) => {
            let report = run_pipeline(&pipeline_config(&a)?)?;
            for (stage, t) in &report.timings {
                log::info!("{stage}: {:.3} s", t.as_secs_f64());
            }
            let art = &report.artifacts;
            for path in [&art.filtered, &art.features_manifest, &art.image] {
                println!("wrote {}", path.display());
            }
            if let Some((input, filtered)) = &report.fidelity {
                report_fidelity(input, filtered);
            }
        }
        Command::Phantom(a) => {
            let spec = phantom_spec(&a);
            let mut volume = make_phantom(&spec).at(Stage::Phantom)?;
            if let Some(s) = a.spacing {
                volume = volume.with_spacing(s).at(Stage::Phantom)?;
            }
            save_volume(&volume, &a.output, Stage::Phantom)?;
            println!("wrote {} {:?}", a.output.display(), volume.dims().to_array());
        }
        Command::Serve(a) => {
            let base = base_config(a.config.as_deref())?;
            let mut processing = Processing { bilateral: base.bilateral, features: base.features };
            a.bilateral.apply(&mut processing.bilateral);
            a.features.apply(&mut processing.features);
            processing.bilateral.validate().at(Stage::Config)?;
            processing.features.frangi.validate().at(Stage::Config)?;
            processing.features.gvf.validate().at(Stage::Config)?;
            let config = ServiceConfig {
                max_body_bytes: a.max_upload_mib.saturating_mul(1024 * 1024),
                session_capacity: a.sessions.max(1),
                processing,
            };
            let runtime = tokio::runtime::Runtime::new().at(Stage::Serve)?;
            runtime
                .block_on(usvis_service::serve((a.host, a.port).into(), config))
                .at(Stage::Serve)?;
        }
    }
    Ok(())
}

pub fn phantom_spec(a: &PhantomArgs) -> PhantomSpec {
    let d = PhantomSpec::default();
    PhantomSpec {
        kind: a.kind,
        base: a.base.unwrap_or(if a.kind == PhantomKind::Noisy { d.base } else { a.kind }),
        dims: a.dims.unwrap_or(d.dims),
        radius: a.radius.unwrap_or(d.radius),
        axis: a.axis.unwrap_or(d.axis),
        position: a.position.or(d.position),
        foreground: a.foreground.unwrap_or(d.foreground),
        background: a.background.unwrap_or(d.background),
        noise: a.noise.unwrap_or(d.noise),
        seed: a.seed.unwrap_or(d.seed),
    }
}
