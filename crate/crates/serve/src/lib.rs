//! "Carrot Cure" inference service: HTTP API over a trained model plus the
//! bilingual remedy knowledge base.
//!
//! | Route | Response |
//! |---|---|
//! | `GET /health` | `{"status":"ok","model_loaded":bool}` |
//! | `GET /api/v1/classes` | `[{"key","name_en","name_bn"}]` |
//! | `POST /api/v1/predict` | multipart field `image`; [`Prediction`] JSON |
//! | `GET /` | web bundle |
//!
//! Errors are `{"error": code, "message": text}`.

mod http;
mod kb;
mod predict;

pub use http::{router, run, serve_with_shutdown, termination_signal, AppState};
pub use kb::{load_remedy_kb, parse_remedy_kb, KbError, RemedyEntry, RemedyTable};
pub use predict::{predict_image, PredictError, Prediction, RemedyView, MAX_UPLOAD_BYTES};
