use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use kpnet_ffi::*;

fn last_error() -> String {
    let p = kpnet_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn textured_rgb(height: usize, width: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(height * width * 3);
    for y in 0..height {
        for x in 0..width {
            let checker = ((x / 6 + y / 4) % 2) as f64;
            let v = 0.5 + 0.3 * ((x as f64 * 0.31).sin() * (y as f64 * 0.17).cos()) + 0.2 * checker;
            for c in 0..3 {
                out.push(((v * (0.8 + 0.1 * c as f64)).clamp(0.0, 1.0) * 255.0) as u8);
            }
        }
    }
    out
}

#[test]
fn null_arguments_are_reported() {
    unsafe {
        assert_eq!(kpnet_model_init(0, ptr::null_mut()), KpnetStatus::NullPointer);
        assert!(last_error().contains("out"));
        let mut model = ptr::null_mut();
        assert_eq!(kpnet_model_load(ptr::null(), &mut model), KpnetStatus::NullPointer);
        assert!(model.is_null());
        assert_eq!(kpnet_keypoints_len(ptr::null()), 0);
        assert!(kpnet_keypoints_points(ptr::null()).is_null());
        kpnet_model_free(ptr::null_mut());
        kpnet_keypoints_free(ptr::null_mut());
    }
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let path = CString::new("/nonexistent/model.ckpt").unwrap();
    let mut model = ptr::null_mut();
    let status = unsafe { kpnet_model_load(path.as_ptr(), &mut model) };
    assert_eq!(status, KpnetStatus::Io);
    assert!(model.is_null());
    assert!(last_error().contains("nonexistent"));
}

#[test]
fn detect_and_match_an_image_with_itself() {
    let (h, w) = (32, 48);
    let rgb = textured_rgb(h, w);
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(kpnet_model_init(7, &mut model), KpnetStatus::Ok);
        assert_eq!(kpnet_model_descriptor_dim(model), 256);

        let mut kps = ptr::null_mut();
        assert_eq!(kpnet_detect(model, rgb.as_ptr(), h, w, 3 * w, 10, &mut kps), KpnetStatus::Ok);
        assert_eq!(kpnet_keypoints_len(kps), 10);
        assert_eq!(kpnet_keypoints_dim(kps), 256);
        let scores = std::slice::from_raw_parts(kpnet_keypoints_scores(kps), 10);
        assert!(scores.windows(2).all(|s| s[0] >= s[1]));
        let points = std::slice::from_raw_parts(kpnet_keypoints_points(kps), 20);
        assert!(points.iter().all(|v| v.is_finite()));
        let desc = std::slice::from_raw_parts(kpnet_keypoints_descriptors(kps), 10 * 256);
        let norm: f32 = desc[..256].iter().map(|v| v * v).sum();
        assert!((norm - 1.0).abs() < 1e-3);

        let mut count = 0usize;
        assert_eq!(kpnet_match(kps, kps, ptr::null_mut(), 0, &mut count), KpnetStatus::BufferTooSmall);
        assert!(count > 0 && count <= 10);
        let mut pairs = vec![0u32; 2 * count];
        assert_eq!(kpnet_match(kps, kps, pairs.as_mut_ptr(), count, &mut count), KpnetStatus::Ok);
        for m in pairs.chunks(2) {
            assert_eq!(m[0], m[1]);
        }

        kpnet_keypoints_free(kps);
        kpnet_model_free(model);
    }
}

#[test]
fn detect_rejects_bad_geometry() {
    let rgb = vec![0u8; 30 * 40 * 3];
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(kpnet_model_init(0, &mut model), KpnetStatus::Ok);
        let mut kps = ptr::null_mut();
        assert_eq!(kpnet_detect(model, rgb.as_ptr(), 30, 40, 120, 5, &mut kps), KpnetStatus::InvalidArgument);
        assert!(last_error().contains("multiples of 8"));
        assert_eq!(kpnet_detect(model, rgb.as_ptr(), 24, 40, 100, 5, &mut kps), KpnetStatus::InvalidArgument);
        assert_eq!(kpnet_detect(model, rgb.as_ptr(), 24, 40, 120, 1000, &mut kps), KpnetStatus::InvalidArgument);
        assert!(kps.is_null());
        kpnet_model_free(model);
    }
}

#[test]
fn homography_is_recovered_through_the_abi() {
    let truth = [1.1, 0.05, 4.0, -0.03, 0.95, -2.0, 1e-4, -2e-4, 1.0];
    let mut src = Vec::new();
    let mut dst = Vec::new();
    for i in 0..40 {
        let (x, y) = ((i % 8) as f64 * 20.0 + 3.0, (i / 8) as f64 * 25.0 + 5.0);
        let w = truth[6] * x + truth[7] * y + truth[8];
        let (u, v) = ((truth[0] * x + truth[1] * y + truth[2]) / w, (truth[3] * x + truth[4] * y + truth[5]) / w);
        let outlier = i % 5 == 0;
        src.extend([x, y]);
        dst.extend(if outlier { [u + 40.0, v - 35.0] } else { [u, v] });
    }
    let mut h = [0.0; 9];
    let mut inliers = vec![0u8; 40];
    let params = kpnet_ransac_default_params();
    assert_eq!(params.max_iterations, 5000);
    let status = unsafe { kpnet_estimate_homography(src.as_ptr(), dst.as_ptr(), 40, params, h.as_mut_ptr(), inliers.as_mut_ptr()) };
    assert_eq!(status, KpnetStatus::Ok);
    let scale = h[8];
    for (a, b) in h.iter().zip(truth) {
        assert!((a / scale - b).abs() < 1e-6, "{h:?}");
    }
    for (i, &f) in inliers.iter().enumerate() {
        assert_eq!(f == 1, i % 5 != 0);
    }

    let status = unsafe { kpnet_estimate_homography(src.as_ptr(), dst.as_ptr(), 3, params, h.as_mut_ptr(), ptr::null_mut()) };
    assert_eq!(status, KpnetStatus::Estimation);
}

#[test]
fn checkpoint_round_trip_through_the_abi() {
    use kpnet::checkpoint::Checkpoint;
    use kpnet::model::{KeyPointNet, KeypointNetConfig};

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let cfg = KeypointNetConfig { descriptor_dim: 32, ..Default::default() };
    let net = KeyPointNet::<f32>::new(cfg, 5);
    Checkpoint::capture(&net, None, None, 0, None).save(&path).unwrap();
    let c_path = CString::new(path.to_str().unwrap()).unwrap();
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(kpnet_model_load(c_path.as_ptr(), &mut model), KpnetStatus::Ok);
        assert_eq!(kpnet_model_descriptor_dim(model), 32);
        kpnet_model_free(model);
    }
}

#[test]
fn header_matches_exports_and_compiles() {
    let header_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("include").join("kpnet.h");
    let header = std::fs::read_to_string(&header_path).unwrap();
    for name in [
        "kpnet_last_error",
        "kpnet_version",
        "kpnet_model_load",
        "kpnet_model_init",
        "kpnet_model_free",
        "kpnet_detect",
        "kpnet_keypoints_free",
        "kpnet_match",
        "kpnet_estimate_homography",
        "KPNET_STATUS_BUFFER_TOO_SMALL = 6",
        "typedef struct KpnetModel KpnetModel;",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
    let version = unsafe { CStr::from_ptr(kpnet_version()) }.to_str().unwrap();
    assert_eq!(version, env!("CARGO_PKG_VERSION"));

    let Ok(status) = Command::new("cc").arg("--version").output() else {
        eprintln!("no C compiler found; skipping header compilation");
        return;
    };
    assert!(status.status.success());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"kpnet.h\"\n\
         int probe(const KpnetModel *m) {\n\
           KpnetRansacParams p = kpnet_ransac_default_params();\n\
           return (int)kpnet_model_descriptor_dim(m) + (int)p.max_iterations + KPNET_STATUS_OK;\n\
         }\n",
    )
    .unwrap();
    let out = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(header_path.parent().unwrap())
        .arg(&src)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
