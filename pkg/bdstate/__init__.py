# 多模态双相障碍状态分类流水线
