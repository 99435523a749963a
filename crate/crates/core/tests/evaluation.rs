use invrender::evaluation::synthetic::render_config_for;
use invrender::evaluation::*;
use invrender::renderer::render;
use invrender::scene_io::texture::MaterialTexture;

fn small(spec: SyntheticSpec) -> SyntheticSpec {
    SyntheticSpec { texture_resolution: 64, image_size: 32, train_views: 3, test_views: 2, spp: 16, ..spec }
}

#[test]
fn emitted_bundle_re_renders_bit_exactly() {
    let spec = small(SyntheticSpec::checker_sphere());
    let bundle = generate_synthetic_scene(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = bundle.write(dir.path()).unwrap();
    assert_eq!(manifest.train.len(), 3);
    assert!(dir.path().join(&manifest.previews[0]).exists());
    let back = GtBundle::read(dir.path()).unwrap();
    for (i, cam) in back.train_cameras.iter().enumerate() {
        let again = render(&back.scene, cam, &render_config_for(&spec, Split::Train, i)).unwrap();
        assert_eq!(again.rgb, back.train[i].rgb);
        assert_eq!(again.specular, bundle.train[i].specular);
        assert_eq!(again.albedo, bundle.train[i].albedo);
    }
    assert_eq!(back.novel_env.radiance(), bundle.novel_env.radiance());
    assert_eq!(back.spec, spec);
}

#[test]
fn every_primitive_and_pattern_generates() {
    for (primitive, albedo) in [
        (Primitive::Cube, AlbedoPattern::Noise { scale: 4, a: [0.2, 0.2, 0.2], b: [0.8, 0.6, 0.4] }),
        (Primitive::Blob, AlbedoPattern::Gradient { a: [0.1, 0.5, 0.1], b: [0.9, 0.5, 0.1] }),
    ] {
        let spec = small(SyntheticSpec {
            primitive,
            albedo,
            roughness: RoughnessPattern::Checker { cells: 4, a: 0.2, b: 0.7 },
            ..Default::default()
        });
        let b = generate_synthetic_scene(&spec).unwrap();
        assert!(b.train.iter().all(|v| v.mask.count() > 100));
        assert!(b.scene.albedo.in_range() && b.scene.roughness.in_range());
    }
}

/// With uniform unit light, the specular buffer is the GGX directional albedo with Fresnel, so it
/// is bounded by Schlick's reflectance at the smallest possible v·h. For a view at angle θ the
/// half vector of any upper-hemisphere light satisfies v·h ≥ cos((θ + π/2)/2).
#[test]
fn specular_share_respects_the_fresnel_bound() {
    let spec = SyntheticSpec {
        albedo: AlbedoPattern::Gradient { a: [0.5; 3], b: [0.5; 3] },
        roughness: RoughnessPattern::Constant { value: 1.0 },
        env: EnvSpec::uniform(1.0),
        image_size: 48,
        train_views: 1,
        test_views: 0,
        spp: 256,
        texture_resolution: 16,
        ..Default::default()
    };
    let b = generate_synthetic_scene(&spec).unwrap();
    let (buf, cam) = (&b.train[0], &b.train_cameras[0]);
    let f0 = spec.f0;
    let mut checked = 0;
    for y in 0..48 {
        for x in 0..48 {
            if !buf.mask.get(x, y) {
                continue;
            }
            let n = buf.normal.pixel(x, y);
            let d = cam.generate_ray(x as f64 + 0.5, y as f64 + 0.5).dir;
            let cos_v = -(n[0] as f64 * d.x + n[1] as f64 * d.y + n[2] as f64 * d.z);
            if cos_v < 0.2 {
                continue;
            }
            let theta = cos_v.clamp(-1.0, 1.0).acos();
            let vh = ((theta + std::f64::consts::FRAC_PI_2) / 2.0).cos();
            let bound = f0 + (1.0 - f0) * (1.0 - vh).powi(5);
            let s = buf.specular.pixel(x, y);
            let total = buf.rgb.pixel(x, y);
            for k in 0..3 {
                assert!((s[k] as f64) < bound, "({x},{y}) spec {} bound {bound}", s[k]);
                assert!(s[k] < total[k]);
            }
            checked += 1;
        }
    }
    assert!(checked > 500, "{checked}");
}

#[test]
fn novel_light_differs_from_training_light() {
    let spec = small(SyntheticSpec::checker_sphere());
    let b = generate_synthetic_scene(&spec).unwrap();
    for (i, cam) in b.test_cameras.iter().enumerate() {
        let same_light = render(&b.scene, cam, &render_config_for(&spec, Split::Novel, i)).unwrap();
        let p = psnr(&same_light.rgb.map(|v| v.clamp(0.0, 1.0)), &b.novel[i].rgb.map(|v| v.clamp(0.0, 1.0)), Some(&b.novel[i].mask), 1.0)
            .unwrap();
        assert!(p < 35.0, "{p}");
    }
}

#[test]
fn ground_truth_scores_the_cap_and_scaled_albedo_aligns() {
    let spec = small(SyntheticSpec::checker_sphere());
    let b = generate_synthetic_scene(&spec).unwrap();
    let r = evaluate_decomposition(&b.scene, &b).unwrap();
    assert_eq!(r.aligned_albedo_psnr, PSNR_CAP);
    assert_eq!(r.albedo_psnr, PSNR_CAP);
    assert_eq!(r.view_psnr, PSNR_CAP);
    assert_eq!(r.relight_psnr, PSNR_CAP);
    assert_eq!(r.roughness_mse, 0.0);
    assert!(r.channel_ratio_deviation < 1e-9);
    assert!(r.to_table().contains("mean"));
    let json: MetricReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
    assert_eq!(json, r);

    let mut brighter = b.scene.clone();
    brighter.albedo = MaterialTexture::from_image(brighter.albedo.kind, b.scene.albedo.image.map(|v| v * 1.5)).unwrap();
    let r = evaluate_decomposition(&brighter, &b).unwrap();
    assert!(r.aligned_albedo_psnr >= 90.0, "{}", r.aligned_albedo_psnr);
    assert!(r.albedo_psnr.is_finite() && r.albedo_psnr < 30.0, "{}", r.albedo_psnr);
    assert!(r.channel_ratio_deviation < 1e-5);

    let mut wrong = b.scene.clone();
    wrong.roughness = MaterialTexture::constant(wrong.roughness.kind, 8, 8, &[0.5]).unwrap();
    assert!(evaluate_decomposition(&wrong, &b).is_err());
}
