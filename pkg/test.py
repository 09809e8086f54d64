#!/usr/bin/env python3
"""
Smoke test script for densepose-kit
Run basic checks to ensure the install is working
"""

import sys


def test_imports():
    """Test if all required packages can be imported."""
    required_packages = ["yaml", "rich", "pandas", "psutil", "numpy"]

    failed_imports = []
    for package in required_packages:
        try:
            __import__(package)
            print(f"✅ {package}")
        except ImportError:
            failed_imports.append(package)
            print(f"❌ {package}")

    if failed_imports:
        print(f"\n⚠️  Missing packages: {', '.join(failed_imports)}")
        print("Run: pip install -r requirements.txt")
    assert not failed_imports


def test_config():
    """Test configuration loading."""
    from densepose_kit.config import RunConfig, load_config

    config = RunConfig.from_dict(load_config())
    print("✅ Configuration loaded successfully")
    print(f"   Skeleton: {config.skeleton.k} keypoints")
    print(f"   NMS: {config.nms.mode} at OKS {config.nms.oks_threshold}")
    print(f"   Worker threads: {config.jobs}")
    assert config.skeleton.k == 17


def test_pipeline():
    """Simulate one scene, detect and evaluate it."""
    from densepose_kit.core import SkeletonSpec
    from densepose_kit.postprocess import NmsConfig
    from densepose_kit.simulator import NoiseModel, detect, evaluate_scenes, generate_scene, simulate_fields

    spec = SkeletonSpec.coco()
    scene = generate_scene(0)
    fields = simulate_fields(scene, NoiseModel(), 0)
    dets = detect(scene, fields, "fused", NmsConfig(), spec, image_id=1)
    result = evaluate_scenes([scene], dets, spec)
    print(f"✅ {len(scene.instances)} people, {len(dets)} detections, AP {result.ap:.3f}")
    assert 0.0 <= result.ap <= 1.0


def main():
    """Run all checks."""
    print("🧪 Testing densepose-kit setup...\n")

    tests = [
        ("Package Imports", test_imports),
        ("Configuration", test_config),
        ("Simulated Pipeline", test_pipeline),
    ]

    passed = 0
    for test_name, test_func in tests:
        print(f"\n--- Testing {test_name} ---")
        try:
            test_func()
            passed += 1
        except Exception as e:
            print(f"❌ {test_name} failed: {e}")

    print(f"\n📊 Test Results: {passed}/{len(tests)} passed")

    if passed == len(tests):
        print("🎉 All checks passed! densepose-kit is ready to use.")
        print("\nNext steps:")
        print("1. python main.py simulate --scenes 5 --out sim.json")
        print("2. python main.py ablate --seed 7")
    else:
        print("⚠️  Some checks failed. Please fix the issues above.")
        sys.exit(1)


if __name__ == "__main__":
    main()
