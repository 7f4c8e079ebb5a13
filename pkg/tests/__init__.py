"""
PatchForge 测试包
"""
