//! Naive, loop-based recomputation of the whole labelling chain, used to
//! cross-check the scoring engine. It keeps its own copy of the AU tables and
//! shares no code with `scoring` or `subsets`; only the input containers are
//! common.

use std::collections::HashMap;

use crate::model::Emotion;
use crate::scoring::{AuPredictions, ConfidenceTable, EbcPredictions};
use crate::subsets::Subset;

const CODES: [u32; 21] = [1, 2, 4, 5, 6, 7, 9, 10, 11, 12, 14, 15, 16, 17, 20, 22, 23, 24, 25, 26, 27];

const WEIGHTS: [f64; 21] = [
    0.33, 0.5, 0.33, 0.33, 0.5, 1.0, 1.0, 0.5, 1.0, 0.5, 1.0, 1.0, 1.0, 0.33, 1.0, 1.0, 1.0, 1.0, 0.25, 0.25,
    0.5,
];

fn members(emotion: usize) -> Vec<u32> {
    match emotion {
        1 => vec![6, 12, 25],
        2 => vec![1, 4, 6, 11, 15, 17],
        3 => vec![1, 2, 5, 26, 27],
        4 => vec![1, 2, 4, 5, 20, 25, 26, 27],
        5 => vec![9, 10, 16, 17, 25, 27],
        6 => vec![4, 5, 7, 10, 17, 22, 23, 24, 25, 26],
        7 => vec![12, 14],
        _ => vec![],
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleOutput {
    pub image_id: String,
    pub soft_label: [f64; 8],
    pub subset: Option<Subset>,
}

/// Recomputes soft-labels (and subsets, where a hard label is known) for
/// every image of `ebc`, weighting each backbone by its own confidence row.
pub fn brute_force_pipeline(
    hard_labels: &HashMap<String, Emotion>,
    ebc: &EbcPredictions,
    au: &AuPredictions,
    conf: &ConfidenceTable,
    sim_neutral: f64,
) -> Vec<OracleOutput> {
    let au_conf = conf.au.expect("AU confidence row");
    let mut out = Vec::new();
    for (image_id, img) in &ebc.images {
        let mut soft = [0.0f64; 8];
        for e in 0..8 {
            // Ensemble part.
            let cells = &img.per_emotion[e];
            let mut total = 0.0;
            for cell in cells {
                total += conf.ebc[&cell.backbone][e] * cell.p;
            }
            let ebc_part = total / cells.len() as f64;

            // AU part: similarity of emotion e's model output to every emotion.
            let head = &au.images[image_id].per_emotion[e];
            let mut sv = [0.0f64; 8];
            sv[0] = sim_neutral;
            for (k, s) in sv.iter_mut().enumerate().skip(1) {
                for (i, code) in CODES.iter().enumerate() {
                    if members(k).contains(code) {
                        *s += WEIGHTS[i] * head.au_hat[i];
                    }
                }
            }
            let mut rest = 0.0;
            for (k, s) in sv.iter().enumerate() {
                if k != e {
                    rest += s;
                }
            }
            rest /= 7.0;
            let apv_pos = sv[e].exp() / (sv[e].exp() + rest.exp());
            let p_pos = (head.bpv[0] + apv_pos) / 2.0;
            let au_part = au_conf[e] * p_pos;

            soft[e] = (ebc_part + au_part) / 2.0;
        }

        let subset = hard_labels.get(image_id).map(|hard| {
            let h = hard.index();
            let mut rank = 1;
            for j in 0..8 {
                if soft[j] > soft[h] || (soft[j] == soft[h] && j < h) {
                    rank += 1;
                }
            }
            if rank == 1 {
                Subset::Easy
            } else if rank <= 3 {
                Subset::Challenging
            } else {
                Subset::Difficult
            }
        });
        out.push(OracleOutput {
            image_id: image_id.clone(),
            soft_label: soft,
            subset,
        });
    }
    out
}
