use macx::data::Modality;
use macx::model::{self, Fusion, Head, InputWidths, ModelConfig, ModelParams, Precision};
use macx::rng::Rng;
use macx::synth::{self, SyntheticSpec, Task};
use macx::tape::Graph;

fn main() {
    let spec = SyntheticSpec {
        task: Task::Xor3,
        instances: 4,
        seed: 202,
        len_modality: 6,
        len_question: 5,
        len_answer: 3,
        width_modality: 5,
        width_question: 4,
        width_answer: 4,
        length_jitter: 1,
        sigma_noise: 1.0,
        pattern_amp: 2.0,
        ..Default::default()
    };
    let instances = synth::generate_dataset(&spec).unwrap();
    let config = ModelConfig {
        p: 2,
        d: 8,
        modalities: Modality::ALL.to_vec(),
        fusion: Fusion::Late,
        head: Head::Affine,
        widths: InputWidths { question: 4, answer: 4, visual: 5, transcript: 5, acoustic: 5 },
        precision: Precision::F64,
        share_q_transform: false,
    };
    let mut params = ModelParams::<f64>::init(&config, 11).unwrap();
    let mut jitter = Rng::from_key(31, 7);
    for idx in 0..params.reg.len() {
        for v in params.reg.value_mut(idx).data_mut() {
            *v += jitter.range(-0.6, 0.6);
        }
    }
    let wr = params.reg.lookup("late.Ac.read.Ac.f_r.w").unwrap();
    println!("late.Ac.read.Ac.f_r.w = {:?}", params.reg.value(wr).data());
    for (i, inst) in instances.iter().enumerate() {
        let mut g = Graph::new();
        let pass = model::forward_on(&mut g, &params, inst).unwrap();
        let ro = &pass.prediction.rollouts[2];
        println!("inst {i} Ac valid_len={}", inst.modality(Modality::Acoustic).unwrap().valid_len());
        for (si, st) in ro.steps.iter().enumerate() {
            println!("  step {si} read attn {:?}", st.reads[0].1);
        }
    }
}
