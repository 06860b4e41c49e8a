use std::io::Write;

use clap::Args;
use learndrop::{build, ArchPreset};

use crate::Failure;

pub const FLOPS_CSV_HEADER: &str = "stage,kind,droppable,params,macs,macs_from_stage";

#[derive(Debug, Args)]
pub struct FlopsArgs {
    #[arg(long)]
    arch: ArchPreset,
    /// Input shape CxHxW; 3x32x32 for vgg11-bn and resnet18, else 1x28x28.
    #[arg(long)]
    input: Option<String>,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    /// Print CSV instead of an aligned table.
    #[arg(long)]
    csv: bool,
}

fn parse_shape(s: &str) -> Result<Vec<usize>, Failure> {
    let dims: Option<Vec<usize>> = s.split('x').map(|d| d.parse().ok()).collect();
    match dims {
        Some(d) if d.len() == 3 => Ok(d),
        _ => Err(Failure::Usage(format!("input shape must be CxHxW, got {s:?}"))),
    }
}

pub fn run(args: FlopsArgs) -> Result<(), Failure> {
    let input = match &args.input {
        Some(s) => parse_shape(s)?,
        None if matches!(args.arch, ArchPreset::Vgg11Bn | ArchPreset::Resnet18) => vec![3, 32, 32],
        None => vec![1, 28, 28],
    };
    let g = build::<f32>(args.arch, &input, args.classes, 0).map_err(|e| Failure::Usage(e.to_string()))?;
    let macs = g.stage_macs()?;
    let mut from = vec![0u64; macs.len() + 1];
    for i in (0..macs.len()).rev() {
        from[i] = from[i + 1] + macs[i];
    }
    let last_conv = g.stages().iter().rposition(|s| s.is_conv_bearing()).unwrap_or(0);
    let mut out = std::io::stdout().lock();
    if args.csv {
        writeln!(out, "{FLOPS_CSV_HEADER}")?;
        for (i, s) in g.stages().iter().enumerate() {
            writeln!(out, "{i},{},{},{},{},{}", s.kind_name(), s.droppable, s.param_count(), macs[i], from[i])?;
        }
    } else {
        writeln!(out, "{} on {}x{}x{}, {} classes", args.arch, input[0], input[1], input[2], args.classes)?;
        writeln!(out, "{:>5}  {:<12}  {:>9}  {:>10}  {:>14}  {:>14}", "stage", "kind", "droppable", "params", "macs", "macs from here")?;
        for (i, s) in g.stages().iter().enumerate() {
            writeln!(
                out,
                "{i:>5}  {:<12}  {:>9}  {:>10}  {:>14}  {:>14}",
                s.kind_name(),
                if s.droppable { "yes" } else { "" },
                s.param_count(),
                macs[i],
                from[i]
            )?;
        }
        writeln!(out, "full model:        {:>14}", from[0])?;
        writeln!(out, "after all drops:   {:>14}", from[last_conv])?;
        writeln!(out, "classifier only:   {:>14}", from[last_conv + 1])?;
    }
    Ok(())
}
