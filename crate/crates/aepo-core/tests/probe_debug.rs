//! Temporary diagnostic: decode held-out instances with a trained checkpoint
//! and report per-stage token accuracy. Not part of the suite.

use aepo_core::policy::checkpoint::load_params;
use aepo_core::stages::segment_response;
use aepo_core::tasks::{generate_dataset, TaskSpec};
use aepo_core::trainer::greedy_decode;

#[test]
#[ignore]
fn decode_report() {
    let ckpt = std::env::var("PROBE_CKPT").expect("set PROBE_CKPT");
    let params = load_params(std::path::Path::new(&ckpt)).unwrap();
    let spec = TaskSpec::default();
    let vocab = spec.vocab();
    let (train, eval) = generate_dataset(&spec).unwrap();

    for (name, set) in [("train", &train[..32]), ("eval", &eval[..32])] {
        let mut think_v_ok = 0usize;
        let mut reflect_consistent = 0usize;
        let mut refl_label = 0usize;
        let mut answer_ok = 0usize;
        let mut parsed = 0usize;
        let mut answer_hist = vec![0usize; 4];
        for instance in set {
            let response = greedy_decode(&params, instance).unwrap();
            let Ok(spans) = segment_response(&response, &vocab) else {
                continue;
            };
            parsed += 1;
            let think = &response[spans.thinking.clone()];
            if think.len() >= 3 && think[2] == instance.option_value(instance.label) {
                think_v_ok += 1;
            }
            let reflect = &response[spans.reflection.clone()];
            if reflect.len() >= 2 {
                let probe_value = reflect[0];
                if let Some(k) = vocab.option_index(reflect[1]) {
                    if k < instance.n_options() && instance.option_value(k) == probe_value {
                        reflect_consistent += 1;
                    }
                    if k == instance.label {
                        refl_label += 1;
                    }
                }
            }
            let ans_tok = response[spans.answer.clone()][0];
            if let Some(k) = vocab.option_index(ans_tok) {
                if k < 4 {
                    answer_hist[k] += 1;
                }
                if k == instance.label {
                    answer_ok += 1;
                }
            }
        }
        println!(
            "{name}: parsed {parsed}/32 think_v {think_v_ok} reflect_consistent {reflect_consistent} \
             refl_label {refl_label} answer_ok {answer_ok} answer_hist {answer_hist:?}"
        );
    }
}
