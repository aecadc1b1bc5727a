//! Runs a question through continuous thoughts and reads each thought back
//! through the output head.

use coconut::latent::{coconut_generate, decode_thought, InferenceMode};
use coconut::model::{ModelConfig, Transformer};
use coconut::prosqa::{generate_instance, prosqa_vocabulary, GeneratorConfig, Split};

fn main() -> coconut::Result<()> {
    let vocab = prosqa_vocabulary(true);
    let model = Transformer::<f32>::new(ModelConfig {
        layers: 2,
        d_model: 32,
        heads: 4,
        d_ff: 64,
        vocab_size: vocab.len(),
        ..ModelConfig::default()
    })?;
    let (inst, _) = generate_instance(&GeneratorConfig::default(), 0, Split::Test, 0)?;
    let question = vocab.tokenize(&inst.example.question)?;

    for k in [0, 1, 3] {
        model.reset_forward_passes();
        let g = coconut_generate(&model, &question, InferenceMode::Latent, k, 16, vocab.specials())?;
        println!(
            "k={k}: {} forward passes, {} positions after the question, decoded {:?}",
            model.forward_passes(),
            g.new_tokens,
            vocab.detokenize(&g.output.tokens)
        );
        for (i, t) in g.thoughts.iter().enumerate() {
            let top: Vec<String> = decode_thought(&model, t, 3)?
                .iter()
                .map(|&(id, p)| format!("{}:{p:.3}", vocab.token(id)))
                .collect();
            println!("  thought {i}: {}", top.join(" "));
        }
    }
    Ok(())
}
