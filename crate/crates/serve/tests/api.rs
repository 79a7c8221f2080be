use carrot_core::image::RgbImage;
use carrot_core::model::{LayerSpec, Model, ModelSpec};
use carrot_serve::{router, serve_with_shutdown, AppState, RemedyTable, MAX_UPLOAD_BYTES};
use reqwest::multipart::{Form, Part};
use serde_json::Value;
use tokio::net::TcpListener;
use tokio::sync::oneshot;

fn tiny_model() -> Model {
    let spec = ModelSpec {
        name: "tiny".into(),
        input: [16, 16, 3],
        layers: vec![LayerSpec::conv(4), LayerSpec::Maxpool2x2, LayerSpec::Flatten, LayerSpec::output()],
    };
    Model::init(spec, 7).unwrap()
}

struct Server {
    base: String,
    stop: Option<oneshot::Sender<()>>,
    handle: tokio::task::JoinHandle<std::io::Result<()>>,
}

impl Server {
    async fn start(state: AppState, static_dir: Option<std::path::PathBuf>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        let (tx, rx) = oneshot::channel();
        let handle = tokio::spawn(serve_with_shutdown(listener, router(state, static_dir), async {
            let _ = rx.await;
        }));
        Self { base, stop: Some(tx), handle }
    }

    async fn stop(mut self) {
        self.stop.take().unwrap().send(()).unwrap();
        self.handle.await.unwrap().unwrap();
    }
}

fn png() -> Vec<u8> {
    RgbImage::from_fn(24, 24, |x, y| [200, (x * 9) as u8, (y * 9) as u8]).unwrap().encode_png().unwrap()
}

fn form(field: &str, bytes: Vec<u8>) -> Form {
    Form::new().part(field.to_string(), Part::bytes(bytes).file_name("upload.png"))
}

#[tokio::test]
async fn endpoints_follow_their_schemas() {
    let server = Server::start(AppState::new(Some(tiny_model()), RemedyTable::builtin()), None).await;
    let client = reqwest::Client::new();

    let health: Value = client.get(format!("{}/health", server.base)).send().await.unwrap().json().await.unwrap();
    assert_eq!(health, serde_json::json!({"status": "ok", "model_loaded": true}));

    let classes: Value =
        client.get(format!("{}/api/v1/classes", server.base)).send().await.unwrap().json().await.unwrap();
    let classes = classes.as_array().unwrap();
    assert_eq!(classes.len(), 4);
    for c in classes {
        assert_eq!(c.as_object().unwrap().len(), 3);
        assert!(!c["name_bn"].as_str().unwrap().is_empty());
    }

    let resp =
        client.post(format!("{}/api/v1/predict", server.base)).multipart(form("image", png())).send().await.unwrap();
    assert_eq!(resp.status(), 200);
    let body: Value = resp.json().await.unwrap();
    let probs = body["probabilities"].as_object().unwrap();
    assert_eq!(probs.len(), 4);
    let sum: f64 = probs.values().map(|v| v.as_f64().unwrap()).sum();
    assert!((sum - 1.0).abs() < 1e-6);
    assert_eq!(body["confidence"], probs[body["class"].as_str().unwrap()]);
    for key in ["disease_name_en", "disease_name_bn", "cure_en", "cure_bn", "medicine"] {
        assert!(body["remedy"][key].is_string(), "{key}");
    }

    let index = client.get(&server.base).send().await.unwrap();
    assert_eq!(index.status(), 200);
    assert!(index.text().await.unwrap().contains("/api/v1/predict"));
    server.stop().await;
}

#[tokio::test]
async fn client_errors() {
    let server = Server::start(AppState::new(Some(tiny_model()), RemedyTable::builtin()), None).await;
    let client = reqwest::Client::new();
    let url = format!("{}/api/v1/predict", server.base);

    let text = Form::new().text("image", "definitely not a picture");
    let resp = client.post(&url).multipart(text).send().await.unwrap();
    assert_eq!(resp.status(), 400);
    let body: Value = resp.json().await.unwrap();
    assert_eq!(body["error"], "bad_image");
    assert!(body["message"].is_string());

    let resp = client.post(&url).multipart(form("image", vec![0x89])).send().await.unwrap();
    assert_eq!(resp.status(), 400);

    let resp = client.post(&url).multipart(form("photo", png())).send().await.unwrap();
    assert_eq!(resp.status(), 400);

    let resp = client.post(&url).multipart(form("image", vec![7u8; MAX_UPLOAD_BYTES + 1])).send().await.unwrap();
    assert_eq!(resp.status(), 413);
    let body: Value = resp.json().await.unwrap();
    assert_eq!(body["error"], "payload_too_large");

    let resp = client.post(&url).multipart(form("image", vec![7u8; 3 * MAX_UPLOAD_BYTES])).send().await;
    if let Ok(resp) = resp {
        assert_eq!(resp.status(), 413);
    }

    // Still serving after the rejected uploads.
    let resp = client.post(&url).multipart(form("image", png())).send().await.unwrap();
    assert_eq!(resp.status(), 200);
    server.stop().await;
}

#[tokio::test]
async fn missing_model_is_unavailable() {
    let server = Server::start(AppState::new(None, RemedyTable::builtin()), None).await;
    let client = reqwest::Client::new();
    let health: Value = client.get(format!("{}/health", server.base)).send().await.unwrap().json().await.unwrap();
    assert_eq!(health["model_loaded"], false);
    let resp =
        client.post(format!("{}/api/v1/predict", server.base)).multipart(form("image", png())).send().await.unwrap();
    assert_eq!(resp.status(), 503);
    server.stop().await;
}

#[tokio::test]
async fn static_bundle_is_mounted_at_root() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<p>bundle</p>").unwrap();
    std::fs::write(dir.path().join("app.js"), "console.log(1)").unwrap();
    let server =
        Server::start(AppState::new(Some(tiny_model()), RemedyTable::builtin()), Some(dir.path().into())).await;
    let client = reqwest::Client::new();
    assert_eq!(client.get(&server.base).send().await.unwrap().text().await.unwrap(), "<p>bundle</p>");
    assert_eq!(client.get(format!("{}/app.js", server.base)).send().await.unwrap().status(), 200);
    assert_eq!(client.get(format!("{}/health", server.base)).send().await.unwrap().status(), 200);
    server.stop().await;
}
