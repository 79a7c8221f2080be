use std::collections::BTreeMap;

use carrot_core::dataset::CarrotClass;
use carrot_core::image::decode_image;
use carrot_core::model::Model;
use carrot_core::train::predicted_classes;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kb::{RemedyEntry, RemedyTable};

/// Largest accepted upload, in bytes.
pub const MAX_UPLOAD_BYTES: usize = 10 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum PredictError {
    #[error("upload of {0} bytes exceeds the {MAX_UPLOAD_BYTES}-byte limit")]
    TooLarge(usize),
    #[error("could not read the upload as a PNG or JPEG image: {0}")]
    BadImage(String),
    #[error("no model is loaded")]
    ModelUnavailable,
    #[error("inference failed: {0}")]
    Inference(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemedyView {
    pub disease_name_en: String,
    pub disease_name_bn: String,
    pub cure_en: String,
    pub cure_bn: String,
    pub medicine: String,
}

impl From<&RemedyEntry> for RemedyView {
    fn from(e: &RemedyEntry) -> Self {
        Self {
            disease_name_en: e.disease_name_en.clone(),
            disease_name_bn: e.disease_name_bn.clone(),
            cure_en: e.cure_en.clone(),
            cure_bn: e.cure_bn.clone(),
            medicine: e.medicine.clone(),
        }
    }
}

/// Body of a successful `POST /api/v1/predict`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class: String,
    pub confidence: f64,
    pub probabilities: BTreeMap<String, f64>,
    pub remedy: RemedyView,
}

/// Decode, preprocess exactly as in training, classify and attach the
/// remedy for the predicted class.
pub fn predict_image(model: Option<&Model>, kb: &RemedyTable, bytes: &[u8]) -> Result<Prediction, PredictError> {
    if bytes.len() > MAX_UPLOAD_BYTES {
        return Err(PredictError::TooLarge(bytes.len()));
    }
    let model = model.ok_or(PredictError::ModelUnavailable)?;
    let image = decode_image(bytes).map_err(|e| PredictError::BadImage(e.to_string()))?;
    let probs = model.classify(&[&image]).map_err(|e| PredictError::Inference(e.to_string()))?;
    let class = predicted_classes(&probs)[0];
    let row = probs.data();
    let probabilities = CarrotClass::ALL.iter().map(|c| (c.key().to_string(), row[c.id()] as f64)).collect();
    Ok(Prediction {
        class: class.key().to_string(),
        confidence: row[class.id()] as f64,
        probabilities,
        remedy: kb.get(class).into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use carrot_core::image::RgbImage;
    use carrot_core::model::{LayerSpec, ModelSpec};

    fn tiny_model() -> Model {
        let spec = ModelSpec {
            name: "tiny".into(),
            input: [8, 8, 3],
            layers: vec![LayerSpec::conv(2), LayerSpec::Maxpool2x2, LayerSpec::Flatten, LayerSpec::output()],
        };
        Model::init(spec, 3).unwrap()
    }

    #[test]
    fn probabilities_form_a_distribution() {
        let model = tiny_model();
        let kb = RemedyTable::builtin();
        let png = RgbImage::from_fn(20, 12, |x, y| [(x * 12) as u8, (y * 20) as u8, 90]).unwrap().encode_png().unwrap();
        let p = predict_image(Some(&model), &kb, &png).unwrap();
        let sum: f64 = p.probabilities.values().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        let (best, &conf) = p.probabilities.iter().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap();
        assert_eq!(&p.class, best);
        assert_eq!(p.confidence, conf);
        let class: CarrotClass = p.class.parse().unwrap();
        assert_eq!(p.remedy.medicine, kb.get(class).medicine);
        assert_eq!(p, predict_image(Some(&model), &kb, &png).unwrap());
    }

    #[test]
    fn error_cases() {
        let model = tiny_model();
        let kb = RemedyTable::builtin();
        assert!(matches!(predict_image(Some(&model), &kb, &[0x89]), Err(PredictError::BadImage(_))));
        assert!(matches!(predict_image(Some(&model), &kb, b"hello"), Err(PredictError::BadImage(_))));
        let big = vec![0u8; MAX_UPLOAD_BYTES + 1];
        assert!(matches!(predict_image(Some(&model), &kb, &big), Err(PredictError::TooLarge(_))));
        assert!(matches!(predict_image(None, &kb, b"x"), Err(PredictError::ModelUnavailable)));
    }
}
