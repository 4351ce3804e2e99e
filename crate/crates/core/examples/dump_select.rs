//! Exports a log-probability dump from a simulated iteration, then selects
//! from it the way an external training stack would, and checks that the
//! worklist matches the in-process selection.

use margin_select::dump::{self, SelectOptions};
use margin_select::experiment::{sample_instructions, SeedContext};
use margin_select::plan;
use margin_select::rng;
use margin_select::select::{select_for_iteration, CorpusBudget, Normalization, SelectKind, Strategy};

fn main() -> margin_select::Result<()> {
    let plan = plan::preset("single_iteration")?;
    let seed = 0;
    let ctx = SeedContext::build(&plan, seed)?;
    let ids = &ctx.pool[..200];
    let sample = sample_instructions(
        &ctx.start,
        &ctx.world,
        ids,
        &plan.sampling,
        &mut rng::substream(seed, "sampling", 1),
    )?;

    let mut text = Vec::new();
    dump::write_dump(&dump::export(&ctx.start, &ctx.reference, &sample)?, &mut text)?;
    println!("dump: {} bytes, first lines:", text.len());
    for line in String::from_utf8_lossy(&text).lines().take(3) {
        println!("  {line}");
    }

    let options = SelectOptions {
        instance: SelectKind::Smallest,
        corpus: SelectKind::Smallest,
        budget: CorpusBudget::Fraction(0.25),
        beta: plan.train.beta,
        normalization: Normalization::Raw,
    };
    let records = dump::read_dump(&text[..])?;
    let rows = dump::select_dump(&records, &options, &mut rng::substream(seed, "selection", 1))?;
    let in_process = select_for_iteration(
        &sample,
        &Strategy::instance(options.instance, options.normalization),
        &Strategy::corpus(options.corpus, options.normalization),
        options.budget,
        options.beta,
        &ctx.start,
        &ctx.reference,
        &mut rng::substream(seed, "selection", 1),
    )?;
    println!(
        "{} pairs selected; identical to in-process: {}",
        rows.len(),
        rows == dump::worklist_rows(&in_process)
    );
    dump::write_worklist(&rows[..5.min(rows.len())], std::io::stdout())?;
    Ok(())
}
