//! Prints how one example is rewritten at each curriculum stage.

use coconut::curriculum::{build_stage_example, StageSchedule, Variant};
use coconut::latent::Segment;
use coconut::prosqa::{generate_instance, prosqa_vocabulary, GeneratorConfig, Split};

fn main() -> coconut::Result<()> {
    let vocab = prosqa_vocabulary(true);
    let (inst, _) = generate_instance(&GeneratorConfig::default(), 4, Split::Train, 0)?;
    let ex = &inst.example;

    for variant in [Variant::Coconut, Variant::PauseAsThought, Variant::Cot] {
        let schedule = StageSchedule::prosqa(variant);
        println!("== {} (stage of each epoch: {:?})", variant.name(), &schedule.plan()[..12]);
        for stage in 0..=schedule.last_stage() {
            let item = build_stage_example(ex, stage, &schedule, &vocab)?;
            let mut shown = Vec::new();
            for seg in item.trace.segments() {
                match seg {
                    Segment::Tokens(ids) => shown.push(vocab.detokenize(ids)),
                    Segment::Latent(n) => shown.push(format!("[{n} thought(s)]")),
                }
            }
            let text = shown.join(" ");
            let tail = text.rsplit_once('?').map_or(text.as_str(), |(_, t)| t);
            let supervised = item.mask.iter().filter(|&&m| m).count();
            println!("  stage {stage}: ...?{tail}  ({supervised} supervised)");
        }
    }
    Ok(())
}
